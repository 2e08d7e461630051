use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TimeSignal, SAMPLE_RATE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WavFormat {
    #[default]
    Pcm16,
    Float32,
}

fn wav_err(path: &Path, source: hound::Error) -> Error {
    match source {
        hound::Error::IoError(e) => Error::io(path, e),
        other => Error::Wav {
            path: path.to_path_buf(),
            source: other,
        },
    }
}

/// Reads a mono 16 kHz WAV file stored as 16-bit PCM or 32-bit float.
pub fn read_wav(path: &Path) -> Result<TimeSignal> {
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::invalid(format!(
            "{}: expected mono audio, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::invalid(format!(
            "{}: expected {SAMPLE_RATE} Hz, found {} Hz",
            path.display(),
            spec.sample_rate
        )));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (fmt, bits) => {
            return Err(Error::invalid(format!(
                "{}: unsupported sample format {fmt:?} with {bits} bits",
                path.display()
            )))
        }
    };
    TimeSignal::new(samples)
}

/// Writes a mono WAV file. PCM output is clipped to [-1, 1).
pub fn write_wav(path: &Path, signal: &TimeSignal, format: WavFormat) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate_hz(),
        bits_per_sample: match format {
            WavFormat::Pcm16 => 16,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Pcm16 => hound::SampleFormat::Int,
            WavFormat::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &v in signal.samples() {
        match format {
            WavFormat::Pcm16 => {
                let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                writer.write_sample(q)
            }
            WavFormat::Float32 => writer.write_sample(v as f32),
        }
        .map_err(|e| wav_err(path, e))?;
    }
    writer.finalize().map_err(|e| wav_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_and_pcm_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let x = TimeSignal::new((0..800).map(|i| (i as f64 * 0.01).sin() * 0.5).collect()).unwrap();

        let p = dir.path().join("f.wav");
        write_wav(&p, &x, WavFormat::Float32).unwrap();
        let y = read_wav(&p).unwrap();
        for (a, b) in x.samples().iter().zip(y.samples()) {
            assert!((a - b).abs() < 1e-7);
        }

        let p = dir.path().join("i.wav");
        write_wav(&p, &x, WavFormat::Pcm16).unwrap();
        let y = read_wav(&p).unwrap();
        for (a, b) in x.samples().iter().zip(y.samples()) {
            assert!((a - b).abs() <= 0.5 / 32768.0 + 1e-12);
        }
    }

    #[test]
    fn rejects_stereo_and_other_rates() {
        let dir = tempfile::tempdir().unwrap();
        for (channels, rate) in [(2u16, 16000u32), (1, 8000)] {
            let p = dir.path().join(format!("{channels}_{rate}.wav"));
            let spec = hound::WavSpec {
                channels,
                sample_rate: rate,
                bits_per_sample: 16,
                sample_format: hound::SampleFormat::Int,
            };
            let mut w = hound::WavWriter::create(&p, spec).unwrap();
            for _ in 0..(100 * channels) {
                w.write_sample(0i16).unwrap();
            }
            w.finalize().unwrap();
            assert!(matches!(read_wav(&p), Err(Error::InvalidInput(_))));
        }
    }

    #[test]
    fn missing_file_reports_path() {
        let err = read_wav(Path::new("/nonexistent/x.wav")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.wav"));
    }
}
