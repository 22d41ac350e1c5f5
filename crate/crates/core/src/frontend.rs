//! Audio frontend: 16 kHz PCM WAV in, 80-dim log-mel fbank frames out.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const NUM_MEL_BINS: usize = 80;

/// Mono audio with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a 16-bit PCM, mono, 16 kHz RIFF/WAVE file.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Format(format!("{}: channels={}", path.display(), spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Format(format!("{}: sample_rate={}", path.display(), spec.sample_rate)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Format(format!(
            "{}: encoding={:?} bits_per_sample={}",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    let declared = reader.len() as usize;
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Parse(format!("{}: truncated or corrupt sample data: {e}", path.display())))?;
    if samples.len() != declared {
        return Err(Error::Parse(format!(
            "{}: truncated, {} of {declared} samples",
            path.display(),
            samples.len()
        )));
    }
    Ok(Waveform::new(samples, spec.sample_rate))
}

/// Writes 16-bit PCM mono. Samples are clamped to `[-1, 1]`.
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in &wave.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(|e| wav_error(path, e))?;
    }
    writer.finalize().map_err(|e| wav_error(path, e))
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            Error::Parse(format!("{}: truncated file", path.display()))
        }
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Parse(format!("{}: {other}", path.display())),
    }
}

/// `T × num_bins` log-mel energies, row-major by frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f32>,
    num_frames: usize,
    num_bins: usize,
}

impl FeatureMatrix {
    pub fn new(data: Vec<f32>, num_frames: usize, num_bins: usize) -> Result<Self> {
        if num_frames == 0 || num_bins == 0 || data.len() != num_frames * num_bins {
            return Err(Error::shape(
                "feature_matrix",
                format!("{} values for {num_frames} x {num_bins}", data.len()),
            ));
        }
        Ok(Self {
            data,
            num_frames,
            num_bins,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.num_bins..(t + 1) * self.num_bins]
    }

    pub fn get(&self, t: usize, bin: usize) -> f32 {
        self.data[t * self.num_bins + bin]
    }

    pub fn mean(&self) -> f32 {
        (self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64) as f32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FbankConfig {
    pub sample_rate: u32,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub preemphasis: f64,
    pub n_fft: usize,
    pub num_mel_bins: usize,
    pub low_freq: f64,
    pub high_freq: f64,
    pub energy_floor: f64,
}

impl Default for FbankConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            preemphasis: 0.97,
            n_fft: 512,
            num_mel_bins: NUM_MEL_BINS,
            low_freq: 20.0,
            high_freq: 7600.0,
            energy_floor: 1e-10,
        }
    }
}

impl FbankConfig {
    pub fn window_length(&self) -> usize {
        (self.sample_rate as f64 * self.frame_length_ms / 1000.0).round() as usize
    }

    pub fn window_shift(&self) -> usize {
        (self.sample_rate as f64 * self.frame_shift_ms / 1000.0).round() as usize
    }

    /// `1 + floor((len − window) / shift)`, or 0 when shorter than a window.
    pub fn num_frames(&self, num_samples: usize) -> usize {
        let win = self.window_length();
        if num_samples < win {
            0
        } else {
            1 + (num_samples - win) / self.window_shift()
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * ((mel / 1127.0).exp() - 1.0)
}

/// Triangular filters equally spaced on the mel scale, evaluated at the
/// centre frequency of each FFT bin. Returns `num_bins × (n_fft/2 + 1)`.
pub fn mel_filterbank(cfg: &FbankConfig) -> Vec<Vec<f64>> {
    let n_freqs = cfg.n_fft / 2 + 1;
    let mel_lo = hz_to_mel(cfg.low_freq);
    let mel_hi = hz_to_mel(cfg.high_freq);
    let delta = (mel_hi - mel_lo) / (cfg.num_mel_bins + 1) as f64;
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    (0..cfg.num_mel_bins)
        .map(|m| {
            let left = mel_lo + m as f64 * delta;
            let center = left + delta;
            let right = center + delta;
            (0..n_freqs)
                .map(|k| {
                    let mel = hz_to_mel(k as f64 * bin_hz);
                    if mel > left && mel < right {
                        if mel <= center {
                            (mel - left) / (center - left)
                        } else {
                            (right - mel) / (right - center)
                        }
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Reusable fbank extractor (FFT plan, window and filters computed once).
pub struct Fbank {
    cfg: FbankConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    // Sparse rows: (first bin, weights).
    filters: Vec<(usize, Vec<f64>)>,
}

impl Fbank {
    pub fn new(cfg: FbankConfig) -> Result<Self> {
        let win = cfg.window_length();
        if win == 0 || win > cfg.n_fft || cfg.window_shift() == 0 {
            return Err(Error::Config(format!(
                "window {win} samples must be in 1..={} with a non-zero shift",
                cfg.n_fft
            )));
        }
        if !(0.0 <= cfg.low_freq && cfg.low_freq < cfg.high_freq && cfg.high_freq <= cfg.sample_rate as f64 / 2.0) {
            return Err(Error::Config(format!(
                "mel range {}..{} Hz invalid for {} Hz audio",
                cfg.low_freq, cfg.high_freq, cfg.sample_rate
            )));
        }
        if cfg.energy_floor <= 0.0 {
            return Err(Error::Config("energy floor must be positive".into()));
        }
        let window = (0..win)
            .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (win - 1) as f64).cos())
            .collect();
        let filters = mel_filterbank(&cfg)
            .into_iter()
            .map(|row| {
                let first = row.iter().position(|&w| w > 0.0).unwrap_or(0);
                let last = row.iter().rposition(|&w| w > 0.0).unwrap_or(0);
                (first, row[first..=last.max(first)].to_vec())
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Self {
            cfg,
            fft,
            window,
            filters,
        })
    }

    pub fn config(&self) -> &FbankConfig {
        &self.cfg
    }

    pub fn compute(&self, wave: &Waveform) -> Result<FeatureMatrix> {
        let cfg = &self.cfg;
        if wave.sample_rate != cfg.sample_rate {
            return Err(Error::Format(format!(
                "sample_rate={} (expected {})",
                wave.sample_rate, cfg.sample_rate
            )));
        }
        let win = cfg.window_length();
        let shift = cfg.window_shift();
        let frames = cfg.num_frames(wave.samples.len());
        if frames == 0 {
            return Err(Error::TooShort {
                samples: wave.samples.len(),
                min: win,
            });
        }
        let floor = cfg.energy_floor;
        let n_freqs = cfg.n_fft / 2 + 1;
        let mut out = Vec::with_capacity(frames * cfg.num_mel_bins);
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; n_freqs];
        let mut frame = vec![0.0f64; win];
        for t in 0..frames {
            let src = &wave.samples[t * shift..t * shift + win];
            frame.iter_mut().zip(src).for_each(|(d, &s)| *d = s as f64);
            for i in (1..win).rev() {
                frame[i] -= cfg.preemphasis * frame[i - 1];
            }
            frame[0] -= cfg.preemphasis * frame[0];
            for (i, c) in buf.iter_mut().enumerate() {
                *c = if i < win {
                    Complex::new(frame[i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            power.iter_mut().zip(&buf).for_each(|(p, c)| *p = c.norm_sqr());
            for (first, weights) in &self.filters {
                let e: f64 = weights.iter().zip(&power[*first..]).map(|(w, p)| w * p).sum();
                out.push(e.max(floor).ln() as f32);
            }
        }
        FeatureMatrix::new(out, frames, cfg.num_mel_bins)
    }
}

/// [`Fbank::compute`] with default settings.
pub fn compute_fbank(wave: &Waveform) -> Result<FeatureMatrix> {
    Fbank::new(FbankConfig::default())?.compute(wave)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskFill {
    /// Mean over the whole utterance.
    Mean,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    pub enabled: bool,
    pub num_freq_masks: usize,
    pub max_freq_width: usize,
    pub num_time_masks: usize,
    pub max_time_width: usize,
    pub fill: MaskFill,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            enabled: true,
            num_freq_masks: 2,
            max_freq_width: 10,
            num_time_masks: 2,
            max_time_width: 50,
            fill: MaskFill::Mean,
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskAxis {
    Time,
    Frequency,
}

/// One applied mask: `width` rows (time) or columns (frequency) from `start`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mask {
    pub axis: MaskAxis,
    pub start: usize,
    pub width: usize,
}

/// SpecAugment time and frequency masking.
pub fn spec_augment<R: Rng + ?Sized>(f: &FeatureMatrix, policy: &AugmentPolicy, rng: &mut R) -> FeatureMatrix {
    spec_augment_with_masks(f, policy, rng).0
}

/// Like [`spec_augment`], also returning the masks that were drawn.
pub fn spec_augment_with_masks<R: Rng + ?Sized>(
    f: &FeatureMatrix,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> (FeatureMatrix, Vec<Mask>) {
    let mut out = f.clone();
    let mut masks = Vec::new();
    if !policy.enabled {
        return (out, masks);
    }
    let fill = match policy.fill {
        MaskFill::Mean => f.mean(),
        MaskFill::Zero => 0.0,
    };
    let (t, b) = (f.num_frames, f.num_bins);
    let draws = [
        (MaskAxis::Frequency, policy.num_freq_masks, policy.max_freq_width.min(b), b),
        (MaskAxis::Time, policy.num_time_masks, policy.max_time_width.min(t), t),
    ];
    for (axis, count, max_width, extent) in draws {
        for _ in 0..count {
            let width = rng.gen_range(0..=max_width);
            let start = rng.gen_range(0..=extent - width);
            if width == 0 {
                continue;
            }
            masks.push(Mask { axis, start, width });
            match axis {
                MaskAxis::Frequency => {
                    for row in out.data.chunks_mut(b) {
                        row[start..start + width].iter_mut().for_each(|v| *v = fill);
                    }
                }
                MaskAxis::Time => {
                    out.data[start * b..(start + width) * b].iter_mut().for_each(|v| *v = fill);
                }
            }
        }
    }
    (out, masks)
}
