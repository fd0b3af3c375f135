//! Materialized features: one binary spectrogram file per sample plus
//! train-split normalization statistics.
//!
//! A feature file is little-endian: magic `LMEL`, u32 frame count, u32 Mel
//! bin count, then `frames * n_mels` f32 values row-major. `norm.stats` is a
//! text file with one `mean<TAB>std` line per Mel bin (f64, computed over
//! the train split only).

use std::collections::HashMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::audio::{self, AudioClip, MelConfig, Spectrogram};
use crate::dataset::{Manifest, Split};
use crate::wav;

pub type Result<T> = std::result::Result<T, FeatureError>;

#[derive(Error, Debug)]
pub enum FeatureError {
    #[error("io error for {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad feature file {path}: {msg}")]
    Format { path: String, msg: String },
    #[error("sample id {0:?} is not usable as a file name")]
    UnsafeId(String),
    #[error("missing features for sample {0:?}")]
    Missing(String),
    #[error(transparent)]
    Audio(#[from] audio::AudioError),
    #[error(transparent)]
    Wav(#[from] wav::WavError),
}

const LMEL_MAGIC: &[u8; 4] = b"LMEL";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FeatureError + '_ {
    move |source| FeatureError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write one spectrogram in LMEL format.
pub fn write_spectrogram(path: impl AsRef<Path>, spec: &Spectrogram) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(12 + spec.values().len() * 4);
    buf.extend_from_slice(LMEL_MAGIC);
    buf.extend_from_slice(&(spec.frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(spec.n_mels() as u32).to_le_bytes());
    for v in spec.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(io_err(path))
}

/// Read one LMEL spectrogram.
pub fn read_spectrogram(path: impl AsRef<Path>) -> Result<Spectrogram> {
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(io_err(path))?;
    let mut data = Vec::new();
    file.read_to_end(&mut data).map_err(io_err(path))?;
    let format = |msg: String| FeatureError::Format {
        path: path.display().to_string(),
        msg,
    };
    if data.len() < 12 || &data[0..4] != LMEL_MAGIC {
        return Err(format("missing LMEL header".into()));
    }
    let frames = u32::from_le_bytes(data[4..8].try_into().unwrap()) as usize;
    let n_mels = u32::from_le_bytes(data[8..12].try_into().unwrap()) as usize;
    let expected = 12 + frames * n_mels * 4;
    if data.len() != expected {
        return Err(format(format!(
            "expected {expected} bytes for {frames}x{n_mels}, found {}",
            data.len()
        )));
    }
    let values: Vec<f32> = data[12..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Spectrogram::new(values, frames, n_mels).map_err(FeatureError::Audio)
}

/// Per-Mel-bin mean and standard deviation, computed on the train split.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Identity statistics (mean 0, std 1) for pipelines that skip
    /// standardization.
    pub fn identity(n_mels: usize) -> NormStats {
        NormStats {
            mean: vec![0.0; n_mels],
            std: vec![1.0; n_mels],
        }
    }

    /// Standardize a spectrogram per Mel bin. Bins with a degenerate std
    /// (< 1e-12) are centered but not scaled.
    pub fn standardize(&self, spec: &Spectrogram) -> Vec<f32> {
        let mut out = Vec::with_capacity(spec.values().len());
        for frame in 0..spec.frames() {
            for (m, &v) in spec.row(frame).iter().enumerate() {
                let std = if self.std[m] < 1e-12 { 1.0 } else { self.std[m] };
                out.push(((v as f64 - self.mean[m]) / std) as f32);
            }
        }
        out
    }
}

pub fn write_norm_stats(path: impl AsRef<Path>, stats: &NormStats) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for (m, s) in stats.mean.iter().zip(&stats.std) {
        text.push_str(&format!("{m}\t{s}\n"));
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_norm_stats(path: impl AsRef<Path>) -> Result<NormStats> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut mean = Vec::new();
    let mut std = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split('\t');
        let parse = |field: Option<&str>| -> Result<f64> {
            field
                .and_then(|f| f.parse::<f64>().ok())
                .ok_or_else(|| FeatureError::Format {
                    path: path.display().to_string(),
                    msg: format!("bad stats line {}", i + 1),
                })
        };
        mean.push(parse(parts.next())?);
        std.push(parse(parts.next())?);
    }
    if mean.is_empty() {
        return Err(FeatureError::Format {
            path: path.display().to_string(),
            msg: "empty stats file".into(),
        });
    }
    Ok(NormStats { mean, std })
}

fn feature_file_name(id: &str) -> Result<String> {
    if id.is_empty()
        || id.contains('/')
        || id.contains('\\')
        || id.contains("..")
        || id.contains('\0')
    {
        return Err(FeatureError::UnsafeId(id.to_string()));
    }
    Ok(format!("{id}.lmel"))
}

/// Extraction summary: what was written and with which unified geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractReport {
    pub samples: usize,
    pub target_length: usize,
    pub frames: usize,
    pub n_mels: usize,
}

/// Extract features for every manifest record into `out_dir`.
///
/// Clips are resampled to the config rate, unified to the corpus-wide
/// maximum length (or `cfg.target_length` when nonzero), and written as one
/// LMEL file per sample id, plus `norm.stats` from the train split and a
/// `features.meta` snapshot of the geometry.
pub fn extract_features(
    manifest: &Manifest,
    audio_root: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
    cfg: &MelConfig,
) -> Result<ExtractReport> {
    cfg.validate()?;
    let audio_root = audio_root.as_ref();
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    // Pass 1: decode + resample, tracking the corpus maximum length.
    let mut clips: Vec<(String, AudioClip)> = Vec::with_capacity(manifest.len());
    let mut max_len = 0usize;
    for record in manifest.records() {
        let wav_path = resolve_audio_path(audio_root, &record.audio_path);
        let clip = wav::read_wav(&wav_path)?;
        let clip = audio::resample(&clip, cfg.sample_rate)?;
        max_len = max_len.max(clip.len());
        clips.push((record.id.clone(), clip));
    }
    let target_length = if cfg.target_length > 0 {
        cfg.target_length
    } else {
        max_len
    };

    // Pass 2: unify, extract, write.
    let mut frames = 0usize;
    let mut train_sum = vec![0.0f64; cfg.n_mels];
    let mut train_sumsq = vec![0.0f64; cfg.n_mels];
    let mut train_frames = 0usize;
    let by_split: HashMap<&str, Split> = manifest
        .records()
        .iter()
        .map(|r| (r.id.as_str(), r.split))
        .collect();
    for (id, clip) in &clips {
        let unified = audio::unify_length(clip, target_length)?;
        let spec = audio::log_mel(&unified, cfg)?;
        frames = spec.frames();
        if by_split[id.as_str()] == Split::Train {
            for t in 0..spec.frames() {
                for (m, &v) in spec.row(t).iter().enumerate() {
                    train_sum[m] += v as f64;
                    train_sumsq[m] += (v as f64) * (v as f64);
                }
            }
            train_frames += spec.frames();
        }
        write_spectrogram(out_dir.join(feature_file_name(id)?), &spec)?;
    }

    let stats = if train_frames > 0 {
        let n = train_frames as f64;
        let mean: Vec<f64> = train_sum.iter().map(|s| s / n).collect();
        let std: Vec<f64> = train_sumsq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| (sq / n - m * m).max(0.0).sqrt())
            .collect();
        NormStats { mean, std }
    } else {
        NormStats::identity(cfg.n_mels)
    };
    write_norm_stats(out_dir.join("norm.stats"), &stats)?;

    let meta = format!(
        "sample_rate = {}\nwin_length = {}\nhop_length = {}\nn_mels = {}\nf_min = {}\nf_max = {}\nlog_floor = {}\ntarget_length = {}\nframes = {}\n",
        cfg.sample_rate,
        cfg.win_length,
        cfg.hop_length,
        cfg.n_mels,
        cfg.f_min,
        cfg.f_max,
        cfg.log_floor,
        target_length,
        frames
    );
    let meta_path = out_dir.join("features.meta");
    fs::write(&meta_path, meta).map_err(io_err(&meta_path))?;

    Ok(ExtractReport {
        samples: clips.len(),
        target_length,
        frames,
        n_mels: cfg.n_mels,
    })
}

fn resolve_audio_path(root: &Path, recorded: &str) -> PathBuf {
    let p = Path::new(recorded);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// In-memory view of a feature directory for training and evaluation.
#[derive(Debug)]
pub struct FeatureSet {
    dir: PathBuf,
    stats: NormStats,
    cache: HashMap<String, Spectrogram>,
}

impl FeatureSet {
    /// Open a feature directory, loading `norm.stats`.
    pub fn open(dir: impl AsRef<Path>) -> Result<FeatureSet> {
        let dir = dir.as_ref().to_path_buf();
        let stats = read_norm_stats(dir.join("norm.stats"))?;
        Ok(FeatureSet {
            dir,
            stats,
            cache: HashMap::new(),
        })
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    /// Load (and cache) the raw spectrogram of one sample.
    pub fn raw(&mut self, id: &str) -> Result<&Spectrogram> {
        if !self.cache.contains_key(id) {
            let path = self.dir.join(feature_file_name(id)?);
            let spec = read_spectrogram(&path).map_err(|e| match e {
                FeatureError::Io { .. } => FeatureError::Missing(id.to_string()),
                other => other,
            })?;
            self.cache.insert(id.to_string(), spec);
        }
        Ok(&self.cache[id])
    }

    /// Standardized feature matrix of one sample (row-major frames x mels),
    /// along with its shape.
    pub fn standardized(&mut self, id: &str) -> Result<(Vec<f32>, usize, usize)> {
        let stats = self.stats.clone();
        let spec = self.raw(id)?;
        let shape = (spec.frames(), spec.n_mels());
        Ok((stats.standardize(spec), shape.0, shape.1))
    }

    /// Ids of every `.lmel` file in the directory, sorted.
    pub fn list_ids(dir: impl AsRef<Path>) -> Result<Vec<String>> {
        let dir = dir.as_ref();
        let mut ids = Vec::new();
        for entry in fs::read_dir(dir).map_err(io_err(dir))? {
            let entry = entry.map_err(io_err(dir))?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if let Some(stem) = name.strip_suffix(".lmel") {
                ids.push(stem.to_string());
            }
        }
        ids.sort();
        Ok(ids)
    }
}
