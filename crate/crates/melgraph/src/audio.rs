//! Audio frontend: raw clips to fixed-size log-Mel spectrograms.
//!
//! The conventions are pinned so that feature files are reproducible
//! bit-for-bit:
//!
//! * framing without padding, `frames = 1 + floor((len - win) / hop)`;
//! * periodic Hann window;
//! * HTK Mel scale `mel(f) = 2595 * log10(1 + f / 700)` with triangular,
//!   area-unnormalized filters;
//! * natural log with an additive floor, `ln(energy + log_floor)`.
//!
//! All spectral arithmetic runs in f64 and is cast to f32 at the end.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, AudioError>;

#[derive(Error, Debug)]
pub enum AudioError {
    #[error("invalid clip: {0}")]
    InvalidClip(String),
    #[error("invalid mel config: {0}")]
    InvalidConfig(String),
    #[error("clip of {len} samples is shorter than one window ({win})")]
    TooShort { len: usize, win: usize },
    #[error("clip rate {clip} Hz does not match config rate {config} Hz")]
    RateMismatch { clip: u32, config: u32 },
}

/// A mono clip: real amplitudes (nominally in `[-1, 1]`) at a fixed rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<AudioClip> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidClip("sample rate must be > 0".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::InvalidClip(format!(
                "non-finite sample at index {i}"
            )));
        }
        Ok(AudioClip {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Log-Mel extraction parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub f_min: f64,
    /// Upper filterbank edge; defaults to Nyquist.
    pub f_max: f64,
    pub log_floor: f64,
    /// Corpus-wide unified clip length in samples.
    pub target_length: usize,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            sample_rate: 16000,
            win_length: 512,
            hop_length: 256,
            n_mels: 64,
            f_min: 0.0,
            f_max: 8000.0,
            log_floor: 1e-6,
            target_length: 0,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.win_length == 0 || self.hop_length == 0 {
            return Err(AudioError::InvalidConfig(
                "window and hop must be > 0".into(),
            ));
        }
        if self.hop_length > self.win_length {
            return Err(AudioError::InvalidConfig(format!(
                "hop {} exceeds window {}",
                self.hop_length, self.win_length
            )));
        }
        if self.n_mels == 0 {
            return Err(AudioError::InvalidConfig("n_mels must be >= 1".into()));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= nyquist) {
            return Err(AudioError::InvalidConfig(format!(
                "need 0 <= f_min < f_max <= {nyquist}, got [{}, {}]",
                self.f_min, self.f_max
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(AudioError::InvalidConfig("log_floor must be > 0".into()));
        }
        Ok(())
    }

    /// Frame count this config produces for a clip of `len` samples.
    pub fn frames_for_len(&self, len: usize) -> Option<usize> {
        if len < self.win_length {
            None
        } else {
            Some(1 + (len - self.win_length) / self.hop_length)
        }
    }
}

/// Log-Mel feature matrix, `frames x n_mels`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    values: Vec<f32>,
    frames: usize,
    n_mels: usize,
}

impl Spectrogram {
    pub fn new(values: Vec<f32>, frames: usize, n_mels: usize) -> Result<Spectrogram> {
        if frames == 0 || n_mels == 0 || values.len() != frames * n_mels {
            return Err(AudioError::InvalidClip(format!(
                "bad spectrogram shape: {} values for {frames}x{n_mels}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(AudioError::InvalidClip(format!(
                "non-finite spectrogram value at index {i}"
            )));
        }
        Ok(Spectrogram {
            values,
            frames,
            n_mels,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, frame: usize) -> &[f32] {
        &self.values[frame * self.n_mels..(frame + 1) * self.n_mels]
    }

    pub fn get(&self, frame: usize, mel: usize) -> f32 {
        self.values[frame * self.n_mels + mel]
    }

    /// Column means over frames, as f64.
    pub fn time_average(&self) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.n_mels];
        for frame in 0..self.frames {
            for (a, &v) in acc.iter_mut().zip(self.row(frame)) {
                *a += v as f64;
            }
        }
        for a in &mut acc {
            *a /= self.frames as f64;
        }
        acc
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Zeroth-order modified Bessel function of the first kind (series form),
/// used by the Kaiser window.
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..=40 {
        term *= half / k as f64;
        let sq = term * term;
        sum += sq;
        if sq < sum * 1e-18 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

const RESAMPLE_TAPS_PER_PHASE: usize = 32;
const RESAMPLE_KAISER_BETA: f64 = 8.0;

/// Band-limited sample-rate conversion with a Kaiser-windowed-sinc polyphase
/// filter (32 taps per phase). Identity when the rates already match;
/// otherwise output length is `round(len * target / source)` so duration is
/// preserved within one sample period.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if clip.is_empty() {
        return Err(AudioError::InvalidClip("cannot resample an empty clip".into()));
    }
    if target_rate == 0 {
        return Err(AudioError::InvalidClip("target rate must be > 0".into()));
    }
    if target_rate == clip.sample_rate() {
        return Ok(clip.clone());
    }

    let g = gcd(clip.sample_rate() as u64, target_rate as u64);
    let up = (target_rate as u64 / g) as usize; // L
    let down = (clip.sample_rate() as u64 / g) as usize; // M

    // Odd-length prototype so the group delay is an integer number of
    // upsampled ticks (center = 16 * up).
    let taps = RESAMPLE_TAPS_PER_PHASE * up + 1;
    let center = (RESAMPLE_TAPS_PER_PHASE / 2) * up;
    let cutoff = 1.0 / up.max(down) as f64; // in cycles per upsampled sample, times 2
    let i0_beta = bessel_i0(RESAMPLE_KAISER_BETA);
    let mut filter = Vec::with_capacity(taps);
    for n in 0..taps {
        let offset = n as f64 - center as f64;
        let window_arg = offset / center as f64;
        let w = if window_arg.abs() > 1.0 {
            0.0
        } else {
            bessel_i0(RESAMPLE_KAISER_BETA * (1.0 - window_arg * window_arg).sqrt()) / i0_beta
        };
        filter.push(up as f64 * cutoff * sinc(cutoff * offset) * w);
    }

    let input = clip.samples();
    let in_len = input.len() as u64;
    let out_len = ((in_len * up as u64 + down as u64 / 2) / down as u64).max(1) as usize;
    let mut out = Vec::with_capacity(out_len);
    for m in 0..out_len {
        // Position of output sample m on the upsampled grid, shifted to the
        // filter center so there is no latency.
        let pos = m * down + center;
        let base = (pos / up) as isize;
        let phase = pos % up;
        let mut acc = 0.0f64;
        let mut tap = phase;
        let mut t = 0isize;
        while tap < taps {
            let idx = base - t;
            if idx >= 0 && (idx as usize) < input.len() {
                acc += filter[tap] * input[idx as usize] as f64;
            }
            tap += up;
            t += 1;
        }
        out.push(acc as f32);
    }
    AudioClip::new(out, target_rate)
}

/// Force a clip to exactly `target_length` samples: cut extra samples, extend
/// short clips by repeating them cyclically.
pub fn unify_length(clip: &AudioClip, target_length: usize) -> Result<AudioClip> {
    if clip.is_empty() {
        return Err(AudioError::InvalidClip("cannot unify an empty clip".into()));
    }
    if target_length == 0 {
        return Err(AudioError::InvalidClip("target length must be >= 1".into()));
    }
    let src = clip.samples();
    let samples = if src.len() >= target_length {
        src[..target_length].to_vec()
    } else {
        (0..target_length).map(|i| src[i % src.len()]).collect()
    };
    AudioClip::new(samples, clip.sample_rate())
}

/// Triangular Mel filterbank on the HTK scale: `n_mels` rows over
/// `win_length / 2 + 1` FFT bins. Filters are left unnormalized.
pub fn mel_filterbank(cfg: &MelConfig) -> Vec<Vec<f64>> {
    let n_bins = cfg.win_length / 2 + 1;
    let hz_to_mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let mel_to_hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);

    let mel_min = hz_to_mel(cfg.f_min);
    let mel_max = hz_to_mel(cfg.f_max);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_min + (mel_max - mel_min) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();

    let bin_hz = cfg.sample_rate as f64 / cfg.win_length as f64;
    let mut bank = Vec::with_capacity(cfg.n_mels);
    for m in 0..cfg.n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut row = vec![0.0f64; n_bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            if f > lo && f < hi {
                *w = if f <= mid {
                    (f - lo) / (mid - lo)
                } else {
                    (hi - f) / (hi - mid)
                };
            }
        }
        bank.push(row);
    }
    bank
}

/// Extract a log-Mel spectrogram: Hann-windowed power spectra, Mel
/// filterbank, then `ln(energy + log_floor)`.
pub fn log_mel(clip: &AudioClip, cfg: &MelConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if clip.sample_rate() != cfg.sample_rate {
        return Err(AudioError::RateMismatch {
            clip: clip.sample_rate(),
            config: cfg.sample_rate,
        });
    }
    let frames = cfg
        .frames_for_len(clip.len())
        .ok_or(AudioError::TooShort {
            len: clip.len(),
            win: cfg.win_length,
        })?;

    let win = cfg.win_length;
    let hann: Vec<f64> = (0..win)
        .map(|n| 0.5 * (1.0 - (std::f64::consts::TAU * n as f64 / win as f64).cos()))
        .collect();
    let bank = mel_filterbank(cfg);
    let n_bins = win / 2 + 1;

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(win);
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    let mut power = vec![0.0f64; n_bins];

    let samples = clip.samples();
    let mut values = Vec::with_capacity(frames * cfg.n_mels);
    for t in 0..frames {
        let start = t * cfg.hop_length;
        for n in 0..win {
            buf[n] = Complex::new(samples[start + n] as f64 * hann[n], 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        for row in &bank {
            let energy: f64 = row
                .iter()
                .zip(power.iter())
                .map(|(w, p)| w * p)
                .sum();
            values.push((energy + cfg.log_floor).ln() as f32);
        }
    }
    Spectrogram::new(values, frames, cfg.n_mels)
}
