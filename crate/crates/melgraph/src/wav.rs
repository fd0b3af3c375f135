//! WAV reading and writing.
//!
//! Reads PCM 16-bit and 32-bit float WAV files; stereo (or any multichannel
//! layout) is averaged down to mono. Writing is PCM 16-bit, which is what the
//! synthetic-corpus generator emits.

use std::path::Path;

use thiserror::Error;

use crate::audio::AudioClip;

pub type Result<T> = std::result::Result<T, WavError>;

#[derive(Error, Debug)]
pub enum WavError {
    #[error("wav error for {path}: {source}")]
    Codec {
        path: String,
        source: hound::Error,
    },
    #[error("unsupported wav format in {path}: {msg}")]
    Unsupported { path: String, msg: String },
    #[error("invalid clip: {0}")]
    InvalidClip(String),
}

/// Read a WAV file into a mono clip with samples in `[-1, 1]`.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut reader = hound::WavReader::open(path).map_err(|source| WavError::Codec {
        path: display.clone(),
        source,
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(WavError::Unsupported {
            path: display,
            msg: "zero channels".into(),
        });
    }

    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|source| WavError::Codec {
                path: display.clone(),
                source,
            })?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|source| WavError::Codec {
                path: display.clone(),
                source,
            })?,
        (format, bits) => {
            return Err(WavError::Unsupported {
                path: display,
                msg: format!("{format:?} at {bits} bits (expected PCM16 or float32)"),
            })
        }
    };

    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect()
    };

    AudioClip::new(samples, spec.sample_rate).map_err(|e| WavError::InvalidClip(e.to_string()))
}

/// Write a mono clip as PCM 16-bit WAV. Samples are clamped to `[-1, 1]`.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|source| WavError::Codec {
        path: display.clone(),
        source,
    })?;
    for &s in clip.samples() {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(|source| WavError::Codec {
            path: display.clone(),
            source,
        })?;
    }
    writer.finalize().map_err(|source| WavError::Codec {
        path: display,
        source,
    })
}
