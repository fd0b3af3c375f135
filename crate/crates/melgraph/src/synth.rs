//! Bundled synthetic corpus generator.
//!
//! Every acceptance-style experiment in this repo runs on generated data:
//! each class is a distinct tone mixture, each "speaker" detunes it
//! slightly, and each clip adds seeded jitter and noise. Alongside the
//! WAVs and the manifest the generator emits upstream-style embeddings
//! (unit class directions in a high-dimensional space, plus speaker and
//! sample perturbations), standing in for a large pretrained encoder.
//!
//! Optional label noise corrupts a fraction of the train split's labels
//! while the audio and the embeddings stay driven by the true class. That
//! is the regime where neighbor structure carries information the labels
//! lost.

use std::path::{Path, PathBuf};

use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::audio::AudioClip;
use crate::dataset::{self, Manifest, SampleRecord, Split};
use crate::embedding::{self, EmbeddingMatrix};
use crate::wav;

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Error, Debug)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("io error for {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Embedding(#[from] embedding::EmbeddingError),
    #[error(transparent)]
    Wav(#[from] wav::WavError),
    #[error(transparent)]
    Audio(#[from] crate::audio::AudioError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub speakers: usize,
    /// Fraction of train labels flipped to a different class.
    pub label_noise: f64,
    pub embedding_dim: usize,
    pub sample_rate: u32,
    /// Longest clip length; one clip is pinned to exactly this value so
    /// the unified corpus length is independent of the draw order.
    pub max_duration_s: f64,
    pub min_duration_s: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> SynthConfig {
        SynthConfig {
            classes: 7,
            train_per_class: 20,
            val_per_class: 8,
            test_per_class: 30,
            speakers: 10,
            label_noise: 0.0,
            embedding_dim: 256,
            sample_rate: 16_000,
            max_duration_s: 0.656,
            min_duration_s: 0.35,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(SynthError::Config("need at least 2 classes".into()));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(SynthError::Config(
                "train and test splits need at least one sample per class".into(),
            ));
        }
        if self.speakers < 3 {
            return Err(SynthError::Config(
                "need at least 3 speakers for disjoint split pools".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(SynthError::Config(format!(
                "label_noise must lie in [0, 1], got {}",
                self.label_noise
            )));
        }
        if self.embedding_dim == 0 {
            return Err(SynthError::Config("embedding_dim must be >= 1".into()));
        }
        if !(self.min_duration_s > 0.0 && self.min_duration_s <= self.max_duration_s) {
            return Err(SynthError::Config(format!(
                "need 0 < min_duration <= max_duration, got [{}, {}]",
                self.min_duration_s, self.max_duration_s
            )));
        }
        Ok(())
    }

    fn max_len(&self) -> usize {
        (self.max_duration_s * self.sample_rate as f64).round() as usize
    }

    fn min_len(&self) -> usize {
        (self.min_duration_s * self.sample_rate as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthReport {
    pub samples: usize,
    pub noisy_labels: usize,
    pub manifest_path: PathBuf,
    pub embeddings_path: PathBuf,
    pub max_length_samples: usize,
}

// Speaker pools are split-disjoint: the last two speakers are test-only,
// the one before them validation-only, the rest train-only.
fn speaker_pool(cfg: &SynthConfig, split: Split) -> std::ops::Range<usize> {
    match split {
        Split::Train => 0..cfg.speakers - 3,
        Split::Val => cfg.speakers - 3..cfg.speakers - 2,
        Split::Test => cfg.speakers - 2..cfg.speakers,
    }
}

fn class_fundamental(class: usize) -> f64 {
    180.0 + 55.0 * class as f64
}

// One clip: a three-partial tone mixture at the class fundamental, detuned
// per speaker, with per-clip phase and amplitude jitter plus weak noise.
fn render_clip(
    class: usize,
    speaker: usize,
    speakers: usize,
    len: usize,
    sample_rate: u32,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let f0 = class_fundamental(class);
    let detune = 1.0 + 0.012 * (speaker as f64 - speakers as f64 / 2.0) / speakers as f64;
    let partials = [
        (1.0, 0.55 + rng.random_range(-0.05..0.05)),
        (2.1, 0.30 + rng.random_range(-0.04..0.04)),
        (3.7, 0.15 + rng.random_range(-0.03..0.03)),
    ];
    let phases: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let noise_level = 0.015;
    let dt = 1.0 / sample_rate as f64;
    let mut peak = 0.0f64;
    let mut samples = Vec::with_capacity(len);
    for t in 0..len {
        let time = t as f64 * dt;
        let mut v = 0.0f64;
        for ((mult, amp), phase) in partials.iter().zip(&phases) {
            v += amp * (std::f64::consts::TAU * f0 * detune * mult * time + phase).sin();
        }
        let n: f64 = StandardNormal.sample(rng);
        v += noise_level * n;
        peak = peak.max(v.abs());
        samples.push(v);
    }
    let scale = if peak > 0.0 { 0.8 / peak } else { 1.0 };
    samples.into_iter().map(|v| (v * scale) as f32).collect()
}

// Unit direction per class plus small speaker and per-sample offsets, so
// same-class rows sit near cosine 1 and cross-class rows near 0.
fn embedding_row(
    class_dirs: &[Vec<f64>],
    speaker_offsets: &[Vec<f64>],
    class: usize,
    speaker: usize,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let jitter_scale = 0.045 / (dim as f64).sqrt();
    (0..dim)
        .map(|j| {
            let n: f64 = StandardNormal.sample(rng);
            (class_dirs[class][j] + speaker_offsets[speaker][j] + jitter_scale * n) as f32
        })
        .collect()
}

fn unit_gaussian(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

/// Generate the corpus into `out_dir`: `wav/` clips, `manifest.tsv`, and
/// `upstream.emb`. Fully determined by the config.
pub fn generate(out_dir: impl AsRef<Path>, cfg: &SynthConfig) -> Result<SynthReport> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let wav_dir = out_dir.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|source| SynthError::Io {
        path: wav_dir.display().to_string(),
        source,
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = cfg.embedding_dim;
    let class_dirs: Vec<Vec<f64>> = (0..cfg.classes).map(|_| unit_gaussian(dim, &mut rng)).collect();
    let speaker_offsets: Vec<Vec<f64>> = (0..cfg.speakers)
        .map(|_| {
            let u = unit_gaussian(dim, &mut rng);
            u.into_iter().map(|x| 0.02 * x).collect()
        })
        .collect();

    let mut records = Vec::new();
    let mut emb_ids = Vec::new();
    let mut emb_data = Vec::new();
    let mut pinned = false;
    let plan = [
        (Split::Train, cfg.train_per_class),
        (Split::Val, cfg.val_per_class),
        (Split::Test, cfg.test_per_class),
    ];
    for class in 0..cfg.classes {
        for (split, count) in plan {
            let pool = speaker_pool(cfg, split);
            for i in 0..count {
                let speaker = pool.start + (i % pool.len().max(1));
                let id = format!("c{class}s{speaker}_{}{i}", split.as_str());
                let len = if !pinned {
                    pinned = true;
                    cfg.max_len()
                } else {
                    rng.random_range(cfg.min_len()..=cfg.max_len())
                };
                let samples =
                    render_clip(class, speaker, cfg.speakers, len, cfg.sample_rate, &mut rng);
                let clip = AudioClip::new(samples, cfg.sample_rate)?;
                wav::write_wav(wav_dir.join(format!("{id}.wav")), &clip)?;
                emb_ids.push(id.clone());
                emb_data.extend(embedding_row(
                    &class_dirs,
                    &speaker_offsets,
                    class,
                    speaker,
                    dim,
                    &mut rng,
                ));
                records.push(SampleRecord {
                    id,
                    audio_path: format!("wav/c{class}s{speaker}_{}{i}.wav", split.as_str()),
                    label: format!("cls{class}"),
                    split,
                    speaker: format!("spk{speaker}"),
                    duration_s: Some(len as f64 / cfg.sample_rate as f64),
                });
            }
        }
    }

    // Flip a fixed count of train labels, chosen without replacement. The
    // audio and embeddings above were already rendered from true classes.
    let train_indices: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == Split::Train)
        .map(|(i, _)| i)
        .collect();
    let flips = ((cfg.label_noise * train_indices.len() as f64).round() as usize)
        .min(train_indices.len());
    let chosen = rand::seq::index::sample(&mut rng, train_indices.len(), flips);
    let mut noisy_labels = 0usize;
    for pick in chosen.iter() {
        let idx = train_indices[pick];
        let clean: usize = records[idx].label[3..].parse().expect("generated label");
        let flipped = (clean + 1 + rng.random_range(0..cfg.classes - 1)) % cfg.classes;
        records[idx].label = format!("cls{flipped}");
        noisy_labels += 1;
    }

    let manifest = Manifest::new(records)?;
    let manifest_path = out_dir.join("manifest.tsv");
    dataset::save_manifest(&manifest, &manifest_path)?;

    let emb = EmbeddingMatrix::new(emb_ids, dim, emb_data)?;
    let embeddings_path = out_dir.join("upstream.emb");
    embedding::save_embeddings(&embeddings_path, &emb)?;

    Ok(SynthReport {
        samples: manifest.len(),
        noisy_labels,
        manifest_path,
        embeddings_path,
        max_length_samples: cfg.max_len(),
    })
}
