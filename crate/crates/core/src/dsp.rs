//! Audio ingestion and log-Mel feature extraction.
//!
//! Frames are produced at `sample_rate / hop_size` frames per second (8 at the
//! defaults: 32 kHz audio, 8000-sample Hann windows, 4000-sample hop, 768 Mel
//! bands). Frame `t` covers samples `[t * hop, t * hop + window)`; the clip end
//! is zero padded so a clip of `n` samples yields `ceil(n / hop)` frames.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, ArrayViewMut1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows with an L2 norm below this are left untouched by [`normalize_frames`].
pub const NORM_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub id: String,
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(id: impl Into<String>, samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Parameter("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Data(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            id: id.into(),
            samples,
            sample_rate,
        })
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectrogramConfig {
    pub sample_rate: u32,
    pub window_size: usize,
    pub hop_size: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        Self {
            sample_rate: 32_000,
            window_size: 8_000,
            hop_size: 4_000,
            n_mels: 768,
            fmin: 20.0,
            fmax: 16_000.0,
            log_floor: 1e-10,
        }
    }
}

impl SpectrogramConfig {
    pub fn frames_per_second(&self) -> f64 {
        self.sample_rate as f64 / self.hop_size as f64
    }

    pub fn n_fft_bins(&self) -> usize {
        self.window_size / 2 + 1
    }

    /// Number of frames produced for a clip of `n_samples` samples.
    pub fn n_frames(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.hop_size).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.window_size < 2 || self.hop_size == 0 || self.n_mels == 0
        {
            return Err(Error::Config(
                "sample_rate, window_size, hop_size and n_mels must be positive".into(),
            ));
        }
        if self.hop_size > self.window_size {
            return Err(Error::Config(format!(
                "hop_size {} exceeds window_size {}",
                self.hop_size, self.window_size
            )));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= nyquist) {
            return Err(Error::Config(format!(
                "need 0 <= fmin < fmax <= {nyquist}, got fmin={} fmax={}",
                self.fmin, self.fmax
            )));
        }
        if !(self.log_floor > 0.0 && self.log_floor.is_finite()) {
            return Err(Error::Config("log_floor must be positive and finite".into()));
        }
        Ok(())
    }
}

/// Log-power Mel frames, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFrameMatrix {
    pub frames: Array2<f64>,
    pub frames_per_second: f64,
    pub normalized: bool,
}

impl MelFrameMatrix {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.ncols()
    }
}

/// Reads a PCM16 or float32 WAV file, downmixing to mono by averaging channels.
///
/// No resampling is performed: a header rate different from `expected_rate` is
/// an error.
pub fn load_audio(path: impl AsRef<Path>, expected_rate: u32) -> Result<AudioClip> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    if spec.sample_rate != expected_rate {
        return Err(Error::RateMismatch {
            expected: expected_rate,
            found: spec.sample_rate,
        });
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>(),
        (hound::SampleFormat::Float, 32) => reader.samples::<f32>().collect(),
        (fmt, bits) => {
            return Err(Error::Format(format!(
                "{}: {bits}-bit {fmt:?} samples (need 16-bit PCM or 32-bit float)",
                path.display()
            )))
        }
    }
    .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;

    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Format(format!("{}: zero channels", path.display())));
    }
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect()
    };
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    AudioClip::new(id, samples, spec.sample_rate)
}

/// Writes a mono 16-bit PCM WAV file.
pub fn write_wav_pcm16(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(other.to_string()),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &clip.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

/// One sinusoidal component of a synthetic clip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tone {
    pub start: f64,
    pub duration: f64,
    pub frequency: f64,
    pub amplitude: f64,
}

/// Sum of sinusoids plus uniform noise in `[-noise_level, noise_level]`.
/// Deterministic for a fixed seed.
pub fn synth_clip(
    id: impl Into<String>,
    tones: &[Tone],
    noise_level: f64,
    sample_rate: u32,
    length: f64,
    seed: u64,
) -> Result<AudioClip> {
    if sample_rate == 0 || !(length >= 0.0) || !(noise_level >= 0.0) {
        return Err(Error::Parameter(
            "need sample_rate > 0, length >= 0, noise_level >= 0".into(),
        ));
    }
    let n = (length * sample_rate as f64).round() as usize;
    let sr = sample_rate as f64;
    let mut buf = vec![0.0f64; n];
    for tone in tones {
        if tone.start < 0.0 || tone.duration < 0.0 || tone.start + tone.duration > length + 1e-9 {
            return Err(Error::Parameter(format!(
                "tone [{}, {}) does not fit in a {length} s clip",
                tone.start,
                tone.start + tone.duration
            )));
        }
        let first = (tone.start * sr).round() as usize;
        let last = (((tone.start + tone.duration) * sr).round() as usize).min(n);
        let omega = 2.0 * std::f64::consts::PI * tone.frequency / sr;
        for (i, v) in buf.iter_mut().enumerate().take(last).skip(first) {
            *v += tone.amplitude * (omega * (i - first) as f64).sin();
        }
    }
    if noise_level > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in buf.iter_mut() {
            *v += noise_level * rng.random_range(-1.0..=1.0);
        }
    }
    if let Some(peak) = buf.iter().map(|v| v.abs()).reduce(f64::max) {
        if peak > 1.0 {
            return Err(Error::Parameter(format!(
                "mix clips: peak amplitude {peak:.4} exceeds 1"
            )));
        }
    }
    AudioClip::new(id, buf.into_iter().map(|v| v as f32).collect(), sample_rate)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// A triangular filter stored as a run of weights starting at `first_bin`.
#[derive(Debug, Clone)]
struct MelFilter {
    first_bin: usize,
    weights: Vec<f64>,
}

/// Mel filters spaced uniformly on the Mel scale between `fmin` and `fmax`,
/// each normalized to unit sum. A filter narrower than the FFT bin spacing
/// would otherwise have no support; it falls back to the bin nearest its
/// center frequency.
fn mel_filterbank(cfg: &SpectrogramConfig) -> Vec<MelFilter> {
    let n_bins = cfg.n_fft_bins();
    let bin_hz = cfg.sample_rate as f64 / cfg.window_size as f64;
    let (mel_lo, mel_hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();

    edges
        .windows(3)
        .map(|e| {
            let (lo, center, hi) = (e[0], e[1], e[2]);
            let first = ((lo / bin_hz).floor().max(0.0)) as usize;
            let last = ((hi / bin_hz).ceil() as usize).min(n_bins - 1);
            let mut weights: Vec<f64> = (first..=last)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let w = if f <= center {
                        (f - lo) / (center - lo)
                    } else {
                        (hi - f) / (hi - center)
                    };
                    w.max(0.0)
                })
                .collect();
            let total: f64 = weights.iter().sum();
            if total > 0.0 {
                weights.iter_mut().for_each(|w| *w /= total);
                MelFilter {
                    first_bin: first,
                    weights,
                }
            } else {
                let nearest = ((center / bin_hz).round() as usize).min(n_bins - 1);
                MelFilter {
                    first_bin: nearest,
                    weights: vec![1.0],
                }
            }
        })
        .collect()
}

/// Precomputed window, FFT plan and filterbank for one [`SpectrogramConfig`].
#[derive(Clone)]
pub struct MelExtractor {
    cfg: SpectrogramConfig,
    window: Vec<f64>,
    filters: Vec<MelFilter>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelExtractor").field("cfg", &self.cfg).finish()
    }
}

impl MelExtractor {
    pub fn new(cfg: SpectrogramConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.window_size;
        // periodic Hann
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let filters = mel_filterbank(&cfg);
        let fft = FftPlanner::new().plan_fft_forward(n);
        Ok(Self {
            cfg,
            window,
            filters,
            fft,
        })
    }

    pub fn config(&self) -> &SpectrogramConfig {
        &self.cfg
    }

    /// Linear (pre-log) Mel power for every frame.
    pub fn mel_power(&self, clip: &AudioClip) -> Result<Array2<f64>> {
        if clip.sample_rate != self.cfg.sample_rate {
            return Err(Error::RateMismatch {
                expected: self.cfg.sample_rate,
                found: clip.sample_rate,
            });
        }
        if let Some(i) = clip.samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Data(format!("non-finite sample at index {i}")));
        }
        let (win, hop) = (self.cfg.window_size, self.cfg.hop_size);
        let n_frames = self.cfg.n_frames(clip.samples.len());
        let mut out = Array2::zeros((n_frames, self.cfg.n_mels));
        let mut buf = vec![Complex::new(0.0, 0.0); win];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0f64; self.cfg.n_fft_bins()];

        for (t, row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let start = t * hop;
            for (i, b) in buf.iter_mut().enumerate() {
                let s = clip.samples.get(start + i).copied().unwrap_or(0.0) as f64;
                *b = Complex::new(s * self.window[i], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            self.pool(&power, row);
        }
        Ok(out)
    }

    fn pool(&self, power: &[f64], mut row: ArrayViewMut1<f64>) {
        for (m, filt) in self.filters.iter().enumerate() {
            row[m] = filt
                .weights
                .iter()
                .zip(&power[filt.first_bin..])
                .map(|(w, p)| w * p)
                .sum();
        }
    }

    pub fn extract(&self, clip: &AudioClip) -> Result<MelFrameMatrix> {
        let floor = self.cfg.log_floor;
        let frames = self.mel_power(clip)?.mapv_into(|p| (p + floor).ln());
        Ok(MelFrameMatrix {
            frames,
            frames_per_second: self.cfg.frames_per_second(),
            normalized: false,
        })
    }

    /// Log-Mel frames scaled to unit L2 norm: the input to PCA and the
    /// codebook.
    pub fn features(&self, clip: &AudioClip) -> Result<MelFrameMatrix> {
        Ok(normalize_frames(self.extract(clip)?))
    }
}

/// Log-power Mel spectrogram of `clip`, `ceil(len / hop)` frames by `n_mels`.
pub fn mel_spectrogram(clip: &AudioClip, cfg: &SpectrogramConfig) -> Result<MelFrameMatrix> {
    MelExtractor::new(cfg.clone())?.extract(clip)
}

/// Scales every row to unit L2 norm. Rows with norm below [`NORM_EPSILON`]
/// are left unchanged.
pub fn normalize_frames(mut m: MelFrameMatrix) -> MelFrameMatrix {
    normalize_rows(&mut m.frames);
    m.normalized = true;
    m
}

pub(crate) fn normalize_rows(frames: &mut Array2<f64>) {
    for mut row in frames.axis_iter_mut(Axis(0)) {
        let norm = row.dot(&row).sqrt();
        if norm >= NORM_EPSILON {
            row.mapv_inplace(|v| v / norm);
        }
    }
}
