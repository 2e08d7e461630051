//! Inference and measurement: enhancement, SI-SDR, latent diagnostics and
//! tabular reports.

use std::fmt::Write as _;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{BatchOptions, Corpus, MixtureBatches, SignalKind, Split};
use crate::error::{Error, Result};
use crate::latent::GaussianTensors;
use crate::networks::nn::Mode;
use crate::networks::{MaskDecoderModel, NsvaeModel, SpecBatch, VaeModel};
use crate::spectral::{apply_mask, istft, stft, ComplexMask, ComplexSpectrogram, StftConfig, TimeSignal};

/// Anything that maps a noisy spectrogram to a complex mask.
pub trait MaskEstimator {
    fn estimate_mask(&self, noisy: &ComplexSpectrogram) -> Result<ComplexMask>;
}

/// NSVAE encoder plus fine-tuned mask decoder. Uses the posterior mean
/// unless `sample_seed` is set.
pub struct Enhancer<'a> {
    pub nsvae: &'a NsvaeModel,
    pub decoder: &'a MaskDecoderModel,
    pub sample_seed: Option<u64>,
}

impl<'a> Enhancer<'a> {
    pub fn new(nsvae: &'a NsvaeModel, decoder: &'a MaskDecoderModel) -> Result<Self> {
        if nsvae.network != decoder.network {
            return Err(Error::Config(
                "NSVAE and mask decoder checkpoints have different architectures".into(),
            ));
        }
        Ok(Self {
            nsvae,
            decoder,
            sample_seed: None,
        })
    }
}

fn single_batch(spec: &ComplexSpectrogram, dtype: DType) -> Result<SpecBatch> {
    SpecBatch::from_spectrograms(&[spec], dtype, &Device::Cpu)
}

fn latent_input(speech: &GaussianTensors, sample_seed: Option<u64>) -> Result<(Tensor, Tensor)> {
    match sample_seed {
        None => Ok((speech.mu_re.clone(), speech.mu_im.clone())),
        Some(seed) => {
            use rand::SeedableRng;
            use rand_distr::{Distribution, StandardNormal};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let shape = speech.dims().to_vec();
            let n: usize = shape.iter().product();
            let mut draw = || -> Result<Tensor> {
                let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                Ok(Tensor::from_vec(v, shape.as_slice(), &Device::Cpu)?.to_dtype(speech.sigma.dtype())?)
            };
            let (a, b) = (draw()?, draw()?);
            speech.sample(&a, &b)
        }
    }
}

impl MaskEstimator for Enhancer<'_> {
    fn estimate_mask(&self, noisy: &ComplexSpectrogram) -> Result<ComplexMask> {
        let y = single_batch(noisy, self.nsvae.store.dtype())?;
        let skip = self.decoder.decoder.skip_connections();
        let enc = self.nsvae.encoder.forward(&y, Mode::Eval, skip)?;
        let (z_re, z_im) = latent_input(&enc.speech, self.sample_seed)?;
        let mask = self
            .decoder
            .decoder
            .forward(&z_re, &z_im, enc.skips.as_ref(), Mode::Eval, y.lengths.clone())?;
        mask.to_mask(0)
    }
}

/// stft, mask, apply, istft. The output has the input's length.
pub fn enhance_with(estimator: &dyn MaskEstimator, noisy: &TimeSignal, cfg: &StftConfig) -> Result<TimeSignal> {
    let y = stft(noisy, cfg)?;
    let mask = estimator.estimate_mask(&y)?;
    istft(&apply_mask(&y, &mask)?)
}

pub fn enhance(nsvae: &NsvaeModel, decoder: &MaskDecoderModel, noisy: &TimeSignal, cfg: &StftConfig) -> Result<TimeSignal> {
    enhance_with(&Enhancer::new(nsvae, decoder)?, noisy, cfg)
}

/// The pipeline before fine-tuning: NSVAE speech mean decoded by the
/// pretrained speech VAE decoder as a spectrogram.
pub fn pre_finetune_estimate(nsvae: &NsvaeModel, cvae: &VaeModel, noisy: &TimeSignal, cfg: &StftConfig) -> Result<TimeSignal> {
    if nsvae.network != cvae.network {
        return Err(Error::Config("NSVAE and speech VAE have different architectures".into()));
    }
    if cvae.skip_connections {
        return Err(Error::Config("pre-fine-tuning pipeline needs a speech VAE without skips".into()));
    }
    let y = stft(noisy, cfg)?;
    let batch = single_batch(&y, nsvae.store.dtype())?;
    let enc = nsvae.encoder.forward(&batch, Mode::Eval, false)?;
    let out = cvae
        .decoder
        .forward(&enc.speech.mu_re, &enc.speech.mu_im, None, Mode::Eval, batch.lengths.clone())?;
    istft(&out.to_spectrogram(0, *cfg, Some(noisy.len()))?)
}

/// SI-SDR in dB. Returns `+inf` when the scaled reference matches the
/// estimate to rounding precision.
pub fn si_sdr_metric(est: &TimeSignal, reference: &TimeSignal) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::invalid(format!(
            "signal lengths differ: {} vs {}",
            est.len(),
            reference.len()
        )));
    }
    let ref_energy = reference.energy();
    if ref_energy == 0.0 {
        return Err(Error::invalid("SI-SDR reference has zero energy"));
    }
    let dot: f64 = est.samples().iter().zip(reference.samples()).map(|(a, b)| a * b).sum();
    let scale = dot / ref_energy;
    let target_energy = scale * scale * ref_energy;
    let distortion: f64 = est
        .samples()
        .iter()
        .zip(reference.samples())
        .map(|(e, r)| (scale * r - e).powi(2))
        .sum();
    let tol = (4.0 * f64::EPSILON).powi(2) * est.len() as f64;
    if distortion <= tol * target_energy {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (target_energy / distortion).log10())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub si_sdr_db: f64,
    pub recon_si_sdr_db: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub mean: f64,
    /// 95% normal-approximation half-width; `None` below two values.
    pub half_width: Option<f64>,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let half_width = (n > 1).then(|| {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * (var / n as f64).sqrt()
        });
        Some(Self { n, mean, half_width })
    }

    pub fn render(&self) -> String {
        match self.half_width {
            Some(h) => format!("{:.3} ± {:.3}", self.mean, h),
            None => format!("{:.3} ± n/a", self.mean),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
    pub si_sdr: Aggregate,
    pub recon_si_sdr: Option<Aggregate>,
}

fn fmt_num(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

fn parse_num(s: &str) -> Result<f64> {
    match s {
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => s.parse().map_err(|_| Error::invalid(format!("bad number {s:?} in CSV"))),
    }
}

/// Aggregates per-utterance rows.
pub fn report(rows: Vec<MetricRow>) -> Result<MetricsReport> {
    let sdr: Vec<f64> = rows.iter().map(|r| r.si_sdr_db).collect();
    let si_sdr = Aggregate::of(&sdr).ok_or_else(|| Error::invalid("report needs at least one row"))?;
    let recon: Vec<f64> = rows.iter().filter_map(|r| r.recon_si_sdr_db).collect();
    Ok(MetricsReport {
        recon_si_sdr: Aggregate::of(&recon),
        si_sdr,
        rows,
    })
}

impl MetricsReport {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<24} {:>12} {:>16}", "id", "si_sdr_db", "recon_si_sdr_db");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<24} {:>12.3} {:>16}",
                r.id,
                r.si_sdr_db,
                r.recon_si_sdr_db.map_or("-".to_string(), |v| format!("{v:.3}"))
            );
        }
        let _ = writeln!(out, "mean si_sdr_db: {} (n={})", self.si_sdr.render(), self.si_sdr.n);
        if let Some(a) = &self.recon_si_sdr {
            let _ = writeln!(out, "mean recon_si_sdr_db: {} (n={})", a.render(), a.n);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,si_sdr_db,recon_si_sdr_db\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{}",
                r.id,
                fmt_num(r.si_sdr_db),
                r.recon_si_sdr_db.map_or(String::new(), fmt_num)
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("id,si_sdr_db,recon_si_sdr_db") {
            return Err(Error::invalid("unexpected metrics CSV header"));
        }
        let rows = lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 3 {
                    return Err(Error::invalid(format!("bad metrics CSV row {l:?}")));
                }
                Ok(MetricRow {
                    id: f[0].to_string(),
                    si_sdr_db: parse_num(f[1])?,
                    recon_si_sdr_db: if f[2].is_empty() { None } else { Some(parse_num(f[2])?) },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        report(rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentDiagnostics {
    /// Mean over utterances of the frame-averaged KL to the prior.
    pub kll: f64,
    pub recon_si_sdr_db: f64,
    pub utterances: usize,
}

/// KLL and reconstruction SI-SDR of a pretrained VAE over one split.
pub fn latent_diagnostics(model: &VaeModel, corpus: &Corpus, kind: SignalKind, split: Split, cfg: &StftConfig) -> Result<LatentDiagnostics> {
    let ids = corpus.ids(kind, split);
    if ids.is_empty() {
        return Err(Error::invalid(format!("split {split:?} has no {kind:?} utterances")));
    }
    let (mut kll, mut sdr) = (0.0, 0.0);
    for id in &ids {
        let x = corpus.audio(id)?;
        let spec = stft(x, cfg)?;
        let batch = single_batch(&spec, model.store.dtype())?;
        let enc = model.encoder.forward(&batch, Mode::Eval, model.skip_connections)?;
        kll += enc
            .speech
            .kl_to_prior()?
            .mean_all()?
            .to_dtype(DType::F64)?
            .to_scalar::<f64>()?;
        let out = model.decoder.forward(
            &enc.speech.mu_re,
            &enc.speech.mu_im,
            enc.skips.as_ref(),
            Mode::Eval,
            batch.lengths.clone(),
        )?;
        let xh = istft(&out.to_spectrogram(0, *cfg, Some(x.len()))?)?;
        sdr += si_sdr_metric(&xh, x)?;
    }
    let n = ids.len() as f64;
    Ok(LatentDiagnostics {
        kll: kll / n,
        recon_si_sdr_db: sdr / n,
        utterances: ids.len(),
    })
}

/// Per-utterance SI-SDR of the unprocessed input and of an estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhancementEval {
    pub input: MetricsReport,
    pub output: MetricsReport,
}

impl EnhancementEval {
    pub fn improvement_db(&self) -> f64 {
        self.output.si_sdr.mean - self.input.si_sdr.mean
    }
}

/// Scores `estimate` on seeded mixtures of one split at a fixed SNR.
pub fn evaluate_mixtures(
    corpus: &Corpus,
    split: Split,
    snr_db: f64,
    cfg: &StftConfig,
    seed: u64,
    estimate: &dyn Fn(&TimeSignal) -> Result<TimeSignal>,
) -> Result<EnhancementEval> {
    let opts = BatchOptions {
        batch_size: 1,
        snr_range: (snr_db, snr_db),
        segment_secs: None,
    };
    let (mut input, mut output) = (Vec::new(), Vec::new());
    for batch in MixtureBatches::new(corpus, split, opts, *cfg, seed, 0)? {
        for item in batch? {
            let id = format!("{}+{}", item.mix.speech_id, item.mix.noise_id);
            let est = estimate(&item.noisy)?;
            input.push(MetricRow {
                id: id.clone(),
                si_sdr_db: si_sdr_metric(&item.noisy, &item.clean)?,
                recon_si_sdr_db: None,
            });
            output.push(MetricRow {
                id,
                si_sdr_db: si_sdr_metric(&est, &item.clean)?,
                recon_si_sdr_db: None,
            });
        }
    }
    Ok(EnhancementEval {
        input: report(input)?,
        output: report(output)?,
    })
}
