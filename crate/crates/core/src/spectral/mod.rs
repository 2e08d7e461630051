//! Time/frequency transforms: Hann-windowed STFT, normalized overlap-add
//! inverse, magnitude extraction and complex mask application.
//!
//! Framing: the signal is front-padded with `frame_length - hop` zeros so
//! that every original sample lies under at least one frame with a nonzero
//! window weight, and the tail is zero-padded to complete the last frame.
//! Spectra are one-sided with `fft_length / 2 + 1` bins. The inverse divides
//! the overlap-added synthesis frames by the summed squared analysis windows
//! (floored at [`WINDOW_FLOOR`]), so reconstruction does not rely on the
//! window/hop pair satisfying COLA.

mod diff;
mod wav;

pub use diff::IstftOperator;
pub use rustfft::num_complex::Complex64;
pub use wav::{read_wav, write_wav, WavFormat};

use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Floor applied to the summed squared windows in the inverse transform.
pub const WINDOW_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSignal {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl TimeSignal {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        Self::with_rate(samples, SAMPLE_RATE)
    }

    pub fn with_rate(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("time signal is empty"));
        }
        if sample_rate_hz == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }

    pub fn power(&self) -> f64 {
        self.energy() / self.samples.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    #[default]
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub frame_length: usize,
    pub hop: usize,
    pub fft_length: usize,
    #[serde(default)]
    pub window: WindowKind,
}

impl Default for StftConfig {
    /// 400-sample frames, 25% overlap, 512-point FFT.
    fn default() -> Self {
        Self {
            frame_length: 400,
            hop: 300,
            fft_length: 512,
            window: WindowKind::Hann,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.frame_length || self.frame_length > self.fft_length {
            return Err(Error::invalid(format!(
                "stft config requires 0 < hop <= frame_length <= fft_length, got hop={} frame={} fft={}",
                self.hop, self.frame_length, self.fft_length
            )));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.fft_length / 2 + 1
    }

    /// Zeros prepended before framing.
    pub fn front_pad(&self) -> usize {
        self.frame_length - self.hop
    }

    /// Frames covering the signal with `front_pad` zeros on both ends.
    pub fn num_frames(&self, signal_len: usize) -> usize {
        let padded = signal_len + 2 * self.front_pad();
        if padded <= self.frame_length {
            1
        } else {
            (padded - self.frame_length).div_ceil(self.hop) + 1
        }
    }

    /// Periodic Hann analysis window of `frame_length` samples.
    pub fn window(&self) -> Vec<f64> {
        let n = self.frame_length as f64;
        (0..self.frame_length)
            .map(|t| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * t as f64 / n).cos())
            .collect()
    }

    /// Reciprocal of the floored summed squared windows over the full
    /// overlap-add buffer of `n_frames` frames.
    pub(crate) fn synthesis_normalizer(&self, n_frames: usize) -> Vec<f64> {
        let window = self.window();
        let total = (n_frames - 1) * self.hop + self.frame_length;
        let mut acc = vec![0.0; total];
        for n in 0..n_frames {
            for (t, w) in window.iter().enumerate() {
                acc[n * self.hop + t] += w * w;
            }
        }
        acc.into_iter().map(|s| 1.0 / s.max(WINDOW_FLOOR)).collect()
    }
}

/// One-sided complex spectrogram, stored frame-major: `F` bins per frame,
/// `N` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    n_bins: usize,
    n_frames: usize,
    data: Vec<Complex64>,
    config: StftConfig,
    signal_len: Option<usize>,
}

impl ComplexSpectrogram {
    pub fn from_frames(
        config: StftConfig,
        n_frames: usize,
        data: Vec<Complex64>,
        signal_len: Option<usize>,
    ) -> Result<Self> {
        config.validate()?;
        let n_bins = config.num_bins();
        if n_frames == 0 || data.len() != n_bins * n_frames {
            return Err(Error::invalid(format!(
                "spectrogram data of length {} does not match {} bins x {} frames",
                data.len(),
                n_bins,
                n_frames
            )));
        }
        if data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::invalid("spectrogram contains non-finite entries"));
        }
        Ok(Self {
            n_bins,
            n_frames,
            data,
            config,
            signal_len,
        })
    }

    pub fn zeros(config: StftConfig, n_frames: usize, signal_len: Option<usize>) -> Result<Self> {
        let len = config.num_bins() * n_frames;
        Self::from_frames(config, n_frames, vec![Complex64::new(0.0, 0.0); len], signal_len)
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn signal_len(&self) -> Option<usize> {
        self.signal_len
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn get(&self, bin: usize, frame: usize) -> Complex64 {
        self.data[frame * self.n_bins + bin]
    }

    pub fn frame(&self, frame: usize) -> &[Complex64] {
        &self.data[frame * self.n_bins..(frame + 1) * self.n_bins]
    }

    /// Entrywise modulus.
    pub fn magnitude(&self) -> RealMatrix {
        RealMatrix {
            n_rows: self.n_bins,
            n_cols: self.n_frames,
            data: self.data.iter().map(|c| c.norm()).collect(),
        }
    }

    /// Entrywise affine combination `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        if self.n_frames != other.n_frames || self.config != other.config {
            return Err(Error::invalid("spectrogram shapes differ"));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| x * a + y * b)
            .collect();
        Self::from_frames(self.config, self.n_frames, data, self.signal_len)
    }
}

/// Real `rows x cols` matrix in column-per-frame order (same layout as
/// [`ComplexSpectrogram`]).
#[derive(Debug, Clone, PartialEq)]
pub struct RealMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub data: Vec<f64>,
}

impl RealMatrix {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[col * self.n_rows + row]
    }
}

/// Complex `F x N` mask with the same layout as [`ComplexSpectrogram`].
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMask {
    pub n_bins: usize,
    pub n_frames: usize,
    pub values: Vec<Complex64>,
}

impl ComplexMask {
    pub fn constant(n_bins: usize, n_frames: usize, value: Complex64) -> Self {
        Self {
            n_bins,
            n_frames,
            values: vec![value; n_bins * n_frames],
        }
    }
}

pub fn stft(signal: &TimeSignal, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    let len = signal.len();
    if len < cfg.frame_length {
        return Err(Error::invalid(format!(
            "signal of {len} samples is shorter than one frame ({})",
            cfg.frame_length
        )));
    }
    let n_frames = cfg.num_frames(len);
    let n_bins = cfg.num_bins();
    let pad = cfg.front_pad();
    let window = cfg.window();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_length);
    let samples = signal.samples();

    let mut data = Vec::with_capacity(n_bins * n_frames);
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_length];
    for n in 0..n_frames {
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for (t, w) in window.iter().enumerate() {
            let p = n * cfg.hop + t;
            if p >= pad && p - pad < len {
                buf[t].re = samples[p - pad] * w;
            }
        }
        fft.process(&mut buf);
        data.extend_from_slice(&buf[..n_bins]);
    }
    ComplexSpectrogram::from_frames(*cfg, n_frames, data, Some(len))
}

/// Inverse STFT by weighted overlap-add. Returns the recorded original
/// length when present, otherwise the full overlap-add span minus the front
/// padding.
pub fn istft(spec: &ComplexSpectrogram) -> Result<TimeSignal> {
    let cfg = spec.config;
    cfg.validate()?;
    if spec.n_bins != cfg.num_bins() {
        return Err(Error::invalid(format!(
            "spectrogram has {} bins but config implies {}",
            spec.n_bins,
            cfg.num_bins()
        )));
    }
    let n_fft = cfg.fft_length;
    let window = cfg.window();
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n_fft);
    let total = (spec.n_frames - 1) * cfg.hop + cfg.frame_length;
    let mut acc = vec![0.0; total];
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for n in 0..spec.n_frames {
        let frame = spec.frame(n);
        buf[..spec.n_bins].copy_from_slice(frame);
        for k in spec.n_bins..n_fft {
            buf[k] = frame[n_fft - k].conj();
        }
        ifft.process(&mut buf);
        for (t, w) in window.iter().enumerate() {
            acc[n * cfg.hop + t] += buf[t].re / n_fft as f64 * w;
        }
    }
    let norm = cfg.synthesis_normalizer(spec.n_frames);
    let pad = cfg.front_pad();
    let out_len = spec.signal_len.unwrap_or(total - pad);
    let samples = (0..out_len)
        .map(|i| {
            let p = i + pad;
            if p < total {
                acc[p] * norm[p]
            } else {
                0.0
            }
        })
        .collect();
    TimeSignal::new(samples)
}

pub fn magnitude(spec: &ComplexSpectrogram) -> RealMatrix {
    spec.magnitude()
}

/// Entrywise complex product `noisy * mask`.
pub fn apply_mask(noisy: &ComplexSpectrogram, mask: &ComplexMask) -> Result<ComplexSpectrogram> {
    if mask.n_bins != noisy.n_bins
        || mask.n_frames != noisy.n_frames
        || mask.values.len() != noisy.data.len()
    {
        return Err(Error::invalid(format!(
            "mask shape {}x{} does not match spectrogram {}x{}",
            mask.n_bins, mask.n_frames, noisy.n_bins, noisy.n_frames
        )));
    }
    let data = noisy
        .data
        .iter()
        .zip(&mask.values)
        .map(|(y, m)| y * m)
        .collect();
    ComplexSpectrogram::from_frames(noisy.config, noisy.n_frames, data, noisy.signal_len)
}
