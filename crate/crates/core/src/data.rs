//! Synthetic corpus, mixture synthesis and batch iteration.
//!
//! Speech stand-ins are harmonic syllables shaped by per-speaker formants,
//! with pitch glides, vibrato and silences. Noise stand-ins are filtered
//! broadband noise and amplitude-modulated narrowband noise. Every speaker
//! and noise source belongs to exactly one split.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{read_wav, stft, write_wav, ComplexSpectrogram, StftConfig, TimeSignal, WavFormat, SAMPLE_RATE};

pub const MANIFEST_FILE: &str = "manifest.json";
const TARGET_RMS: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalKind {
    Speech,
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Nsvae,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Pretrain, Split::Nsvae, Split::Validation, Split::Test];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest directory.
    pub path: PathBuf,
    pub kind: SignalKind,
    pub split: Split,
    /// Speaker or noise-source identity.
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn select(&self, kind: SignalKind, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.kind == kind && e.split == split).collect()
    }

    /// Source identities that occur in more than one split.
    pub fn leaked_sources(&self) -> Vec<String> {
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        let mut leaked = Vec::new();
        for e in &self.entries {
            match seen.get(e.source.as_str()) {
                Some(s) if *s != e.split => leaked.push(e.source.clone()),
                Some(_) => {}
                None => {
                    seen.insert(&e.source, e.split);
                }
            }
        }
        leaked.sort();
        leaked.dedup();
        leaked
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }
}

/// Generator settings. Source counts are split by the given fractions of
/// the training pool (pretrain, nsvae, validation); test sources are extra.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub speakers: usize,
    pub test_speakers: usize,
    pub utterances_per_speaker: usize,
    pub noise_sources: usize,
    pub test_noise_sources: usize,
    pub utterances_per_noise: usize,
    pub split_fractions: [f64; 3],
    pub min_secs: f64,
    pub max_secs: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            speakers: 20,
            test_speakers: 4,
            utterances_per_speaker: 10,
            noise_sources: 20,
            test_noise_sources: 4,
            utterances_per_noise: 10,
            split_fractions: [0.5, 0.4, 0.1],
            min_secs: 1.0,
            max_secs: 4.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let frac_sum: f64 = self.split_fractions.iter().sum();
        if self.split_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (frac_sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must be in [0, 1] and sum to 1, got {:?}",
                self.split_fractions
            )));
        }
        if !(self.min_secs > 0.0 && self.min_secs <= self.max_secs) {
            return Err(Error::Config("need 0 < min_secs <= max_secs".into()));
        }
        if self.speakers < 3 || self.noise_sources < 3 {
            return Err(Error::Config("need at least 3 speakers and 3 noise sources".into()));
        }
        if self.utterances_per_speaker == 0 || self.utterances_per_noise == 0 {
            return Err(Error::Config("utterance counts must be positive".into()));
        }
        Ok(())
    }
}

/// Assigns `n` sources to (pretrain, nsvae, validation) with each split
/// receiving at least one source and counts within one of `fractions * n`.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let mut counts = [0usize; 3];
    let mut remaining = n;
    for i in [2, 1] {
        counts[i] = ((fractions[i] * n as f64).round() as usize).max(1).min(remaining.saturating_sub(1));
        remaining -= counts[i];
    }
    counts[0] = remaining;
    counts
}

fn entity_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normalize_rms(mut x: Vec<f64>, target: f64) -> Vec<f64> {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    if rms > 0.0 {
        let g = target / rms;
        x.iter_mut().for_each(|v| *v *= g);
    }
    x
}

#[derive(Debug, Clone)]
struct Speaker {
    f0: f64,
    formants: Vec<[f64; 3]>,
    bandwidth: f64,
    vibrato_hz: f64,
    vibrato_depth: f64,
    tilt: f64,
}

impl Speaker {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let f0 = rng.gen_range(90.0..260.0);
        let scale = rng.gen_range(0.85..1.2);
        let formants = (0..5)
            .map(|_| {
                [
                    scale * rng.gen_range(300.0..900.0),
                    scale * rng.gen_range(900.0..2300.0),
                    scale * rng.gen_range(2300.0..3400.0),
                ]
            })
            .collect();
        Self {
            f0,
            formants,
            bandwidth: rng.gen_range(60.0..140.0),
            vibrato_hz: rng.gen_range(3.0..7.0),
            vibrato_depth: rng.gen_range(0.005..0.03),
            tilt: rng.gen_range(0.6..1.2),
        }
    }

    fn utterance(&self, rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
        let fs = SAMPLE_RATE as f64;
        let mut out = vec![0.0; len];
        let mut pos = rng.gen_range(0..(0.15 * fs) as usize);
        while pos < len {
            let dur = ((rng.gen_range(0.12..0.32) * fs) as usize).min(len - pos);
            let vowel = &self.formants[rng.gen_range(0..self.formants.len())];
            let start_f0 = self.f0 * rng.gen_range(0.85..1.15);
            let glide = rng.gen_range(-0.25..0.25);
            let amp = rng.gen_range(0.5..1.0);
            let voiced = rng.gen_bool(0.85);
            let mut phase = 0.0;
            let vib_phase = rng.gen_range(0.0..2.0 * PI);
            let mut hp_state = 0.0;
            let mut prev = 0.0;
            for n in 0..dur {
                let t = n as f64 / fs;
                let frac = n as f64 / dur as f64;
                let env = (PI * frac).sin().powf(0.6);
                let value = if voiced {
                    let f0 = start_f0 * (1.0 + glide * frac) * (1.0 + self.vibrato_depth * (2.0 * PI * self.vibrato_hz * t + vib_phase).sin());
                    phase += 2.0 * PI * f0 / fs;
                    let mut s = 0.0;
                    let mut h = 1;
                    while (h as f64) * f0 < 5000.0 {
                        let fh = h as f64 * f0;
                        let gain: f64 = vowel
                            .iter()
                            .map(|&fk| 1.0 / (1.0 + ((fh - fk) / self.bandwidth).powi(2)))
                            .sum::<f64>()
                            + 0.02;
                        s += gain * (h as f64).powf(-self.tilt) * (h as f64 * phase).sin();
                        h += 1;
                    }
                    s
                } else {
                    let w: f64 = rng.sample(StandardNormal);
                    hp_state = 0.6 * (hp_state + w - prev);
                    prev = w;
                    0.3 * hp_state
                };
                out[pos + n] += amp * env * value;
            }
            pos += dur + (rng.gen_range(0.03..0.2) * fs) as usize;
        }
        normalize_rms(out, TARGET_RMS)
    }
}

/// RBJ band-pass biquad (constant peak gain).
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b0: f64,
    b2: f64,
    a1: f64,
    a2: f64,
}

impl Biquad {
    fn bandpass(fc: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * fc / SAMPLE_RATE as f64;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self {
            b0: alpha / a0,
            b2: -alpha / a0,
            a1: -2.0 * w0.cos() / a0,
            a2: (1.0 - alpha) / a0,
        }
    }

    fn run(&self, x: &[f64]) -> Vec<f64> {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        x.iter()
            .map(|&v| {
                let y = self.b0 * v + self.b2 * x2 - self.a1 * y1 - self.a2 * y2;
                x2 = x1;
                x1 = v;
                y2 = y1;
                y1 = y;
                y
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
enum NoiseSource {
    /// White noise through a one-pole low-pass mixed with its high-passed part.
    Broadband { pole: f64, high_mix: f64 },
    /// Band-passed noise with sinusoidal amplitude modulation.
    Narrowband { fc: f64, q: f64, mod_hz: f64, depth: f64 },
}

impl NoiseSource {
    fn draw(rng: &mut ChaCha8Rng, index: usize) -> Self {
        if index % 2 == 0 {
            NoiseSource::Broadband {
                pole: rng.gen_range(0.0..0.9),
                high_mix: rng.gen_range(0.0..0.6),
            }
        } else {
            NoiseSource::Narrowband {
                fc: rng.gen_range(200.0..5000.0),
                q: rng.gen_range(1.0..6.0),
                mod_hz: rng.gen_range(0.5..8.0),
                depth: rng.gen_range(0.3..0.9),
            }
        }
    }

    fn utterance(&self, rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
        let white: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        let out = match *self {
            NoiseSource::Broadband { pole, high_mix } => {
                let mut lp = 0.0;
                let mut prev = 0.0;
                white
                    .iter()
                    .map(|&w| {
                        lp = pole * lp + (1.0 - pole) * w;
                        let hp = w - prev;
                        prev = w;
                        lp + high_mix * hp
                    })
                    .collect()
            }
            NoiseSource::Narrowband { fc, q, mod_hz, depth } => {
                let fc = fc * rng.gen_range(0.95..1.05);
                let phase = rng.gen_range(0.0..2.0 * PI);
                Biquad::bandpass(fc, q)
                    .run(&white)
                    .into_iter()
                    .enumerate()
                    .map(|(n, v)| {
                        let t = n as f64 / SAMPLE_RATE as f64;
                        v * (1.0 + depth * (2.0 * PI * mod_hz * t + phase).sin())
                    })
                    .collect()
            }
        };
        normalize_rms(out, TARGET_RMS)
    }
}

/// In-memory corpus: manifest plus audio keyed by utterance id.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    audio: BTreeMap<String, TimeSignal>,
}

impl Corpus {
    pub fn new(manifest: CorpusManifest, audio: BTreeMap<String, TimeSignal>) -> Result<Self> {
        if let Some(e) = manifest.entries.iter().find(|e| !audio.contains_key(&e.id)) {
            return Err(Error::invalid(format!("no audio for manifest entry {}", e.id)));
        }
        Ok(Self { manifest, audio })
    }

    /// Deterministic synthetic corpus, generated in memory.
    pub fn synthesize(cfg: &SynthConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let fs = SAMPLE_RATE as f64;
        let mut entries = Vec::new();
        let mut audio = BTreeMap::new();
        let assign = |n_train: usize, n_test: usize| -> Vec<Split> {
            let c = split_counts(n_train, cfg.split_fractions);
            let mut v = Vec::new();
            for (split, count) in [(Split::Pretrain, c[0]), (Split::Nsvae, c[1]), (Split::Validation, c[2]), (Split::Test, n_test)] {
                v.extend(std::iter::repeat(split).take(count));
            }
            v
        };
        let speaker_splits = assign(cfg.speakers, cfg.test_speakers);
        let noise_splits = assign(cfg.noise_sources, cfg.test_noise_sources);

        for (s, &split) in speaker_splits.iter().enumerate() {
            let mut rng = entity_rng(seed, 1 + s as u64);
            let speaker = Speaker::draw(&mut rng);
            let source = format!("spk{s:03}");
            for u in 0..cfg.utterances_per_speaker {
                let len = (rng.gen_range(cfg.min_secs..=cfg.max_secs) * fs) as usize;
                let id = format!("{source}_u{u:03}");
                audio.insert(id.clone(), TimeSignal::new(speaker.utterance(&mut rng, len))?);
                entries.push(ManifestEntry {
                    path: PathBuf::from("speech").join(format!("{id}.wav")),
                    id,
                    kind: SignalKind::Speech,
                    split,
                    source: source.clone(),
                });
            }
        }
        for (k, &split) in noise_splits.iter().enumerate() {
            let mut rng = entity_rng(seed, 100_000 + k as u64);
            let noise = NoiseSource::draw(&mut rng, k);
            let source = format!("noise{k:03}");
            for u in 0..cfg.utterances_per_noise {
                let len = (rng.gen_range(cfg.min_secs..=cfg.max_secs) * fs) as usize;
                let id = format!("{source}_u{u:03}");
                audio.insert(id.clone(), TimeSignal::new(noise.utterance(&mut rng, len))?);
                entries.push(ManifestEntry {
                    path: PathBuf::from("noise").join(format!("{id}.wav")),
                    id,
                    kind: SignalKind::Noise,
                    split,
                    source: source.clone(),
                });
            }
        }
        Corpus::new(CorpusManifest { seed, entries }, audio)
    }

    /// Writes the manifest and every utterance as 32-bit float WAV.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for sub in ["speech", "noise"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for e in &self.manifest.entries {
            write_wav(&dir.join(&e.path), &self.audio[&e.id], WavFormat::Float32)?;
        }
        self.manifest.save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = CorpusManifest::load(dir)?;
        let mut audio = BTreeMap::new();
        for e in &manifest.entries {
            audio.insert(e.id.clone(), read_wav(&dir.join(&e.path))?);
        }
        Corpus::new(manifest, audio)
    }

    pub fn audio(&self, id: &str) -> Result<&TimeSignal> {
        self.audio
            .get(id)
            .ok_or_else(|| Error::invalid(format!("unknown utterance {id}")))
    }

    pub fn ids(&self, kind: SignalKind, split: Split) -> Vec<String> {
        self.manifest.select(kind, split).into_iter().map(|e| e.id.clone()).collect()
    }
}

/// Writes a synthetic corpus to `dir` and returns its manifest.
pub fn synth_corpus(cfg: &SynthConfig, seed: u64, dir: &Path) -> Result<CorpusManifest> {
    let corpus = Corpus::synthesize(cfg, seed)?;
    corpus.write(dir)?;
    Ok(corpus.manifest)
}

/// Adds `noise` to `speech` scaled so the full-utterance SNR equals
/// `snr_db`. Returns the mixture and the applied noise gain.
pub fn mix_at_snr(speech: &TimeSignal, noise: &TimeSignal, snr_db: f64) -> Result<(TimeSignal, f64)> {
    if speech.len() != noise.len() {
        return Err(Error::invalid(format!(
            "speech ({}) and noise ({}) lengths differ",
            speech.len(),
            noise.len()
        )));
    }
    let (ps, pn) = (speech.power(), noise.power());
    if ps <= 0.0 || pn <= 0.0 {
        return Err(Error::invalid("mixing requires nonzero speech and noise energy"));
    }
    if snr_db.is_nan() {
        return Err(Error::invalid("SNR is NaN"));
    }
    let gain = (ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let noisy = speech
        .samples()
        .iter()
        .zip(noise.samples())
        .map(|(s, v)| s + gain * v)
        .collect();
    Ok((TimeSignal::new(noisy)?, gain))
}

/// Tiles (with a random circular offset) or randomly crops `noise` to `len`.
pub fn fit_noise(noise: &TimeSignal, len: usize, rng: &mut impl Rng) -> Result<(TimeSignal, usize)> {
    let n = noise.len();
    let offset = if n >= len { rng.gen_range(0..=n - len) } else { rng.gen_range(0..n) };
    let samples = if n >= len {
        noise.samples()[offset..offset + len].to_vec()
    } else {
        (0..len).map(|i| noise.samples()[(offset + i) % n]).collect()
    };
    Ok((TimeSignal::new(samples)?, offset))
}

/// Achieved SNR in dB of a speech / scaled-noise pair.
pub fn measured_snr_db(speech: &TimeSignal, noise: &TimeSignal, gain: f64) -> f64 {
    10.0 * (speech.power() / (gain * gain * noise.power())).log10()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub speech_id: String,
    pub noise_id: String,
    pub snr_db: f64,
    pub gain: f64,
    pub noise_offset: usize,
    /// Start of the speech segment within its utterance.
    pub speech_offset: usize,
}

/// One aligned training example. `noise` is already scaled by the mix gain.
#[derive(Debug, Clone)]
pub struct MixtureItem {
    pub mix: MixSpec,
    pub clean: TimeSignal,
    pub noise: TimeSignal,
    pub noisy: TimeSignal,
    pub x: ComplexSpectrogram,
    pub v: ComplexSpectrogram,
    pub y: ComplexSpectrogram,
}

/// Options shared by the batch iterators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchOptions {
    pub batch_size: usize,
    pub snr_range: (f64, f64),
    /// Crop utterances to this many seconds at a seeded offset.
    pub segment_secs: Option<f64>,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self {
            batch_size: 15,
            snr_range: (-10.0, 15.0),
            segment_secs: None,
        }
    }
}

impl BatchOptions {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.snr_range.0 <= self.snr_range.1) {
            return Err(Error::Config(format!("invalid SNR range {:?}", self.snr_range)));
        }
        if let Some(s) = self.segment_secs {
            if !(s > 0.0) {
                return Err(Error::Config("segment_secs must be positive".into()));
            }
        }
        Ok(())
    }

    fn crop<'a>(&self, x: &'a TimeSignal, rng: &mut ChaCha8Rng) -> (usize, &'a [f64]) {
        match self.segment_secs {
            Some(secs) => {
                let len = ((secs * SAMPLE_RATE as f64) as usize).min(x.len());
                let start = rng.gen_range(0..=x.len() - len);
                (start, &x.samples()[start..start + len])
            }
            None => (0, x.samples()),
        }
    }
}

fn shuffled(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut entity_rng(seed, 1 << 40 | epoch));
    order
}

/// Batches of (clean, noise, noisy) triples over the speech utterances of
/// one split, each paired with a seeded random noise utterance of the same
/// split. The epoch index enters the seed, so every epoch has its own order.
pub struct MixtureBatches<'a> {
    corpus: &'a Corpus,
    speech: Vec<String>,
    noise: Vec<String>,
    opts: BatchOptions,
    stft_cfg: StftConfig,
    order: Vec<usize>,
    rng: ChaCha8Rng,
    pos: usize,
}

impl<'a> MixtureBatches<'a> {
    pub fn new(corpus: &'a Corpus, split: Split, opts: BatchOptions, stft_cfg: StftConfig, seed: u64, epoch: u64) -> Result<Self> {
        opts.validate()?;
        let speech = corpus.ids(SignalKind::Speech, split);
        let noise = corpus.ids(SignalKind::Noise, split);
        if speech.is_empty() || noise.is_empty() {
            return Err(Error::invalid(format!("split {split:?} lacks speech or noise utterances")));
        }
        Ok(Self {
            order: shuffled(speech.len(), seed, epoch),
            rng: entity_rng(seed ^ 0x5eed, 1 << 41 | epoch),
            corpus,
            speech,
            noise,
            opts,
            stft_cfg,
            pos: 0,
        })
    }

    pub fn len_items(&self) -> usize {
        self.speech.len()
    }

    fn make_item(&mut self, index: usize) -> Result<MixtureItem> {
        let speech_id = self.speech[index].clone();
        let noise_id = self.noise[self.rng.gen_range(0..self.noise.len())].clone();
        let full = self.corpus.audio(&speech_id)?;
        let (speech_offset, seg) = self.opts.crop(full, &mut self.rng);
        let clean = TimeSignal::new(seg.to_vec())?;
        let (noise_fit, noise_offset) = fit_noise(self.corpus.audio(&noise_id)?, clean.len(), &mut self.rng)?;
        let (lo, hi) = self.opts.snr_range;
        let snr_db = if lo == hi { lo } else { self.rng.gen_range(lo..hi) };
        let (noisy, gain) = mix_at_snr(&clean, &noise_fit, snr_db)?;
        let noise = TimeSignal::new(noise_fit.samples().iter().map(|v| gain * v).collect())?;
        Ok(MixtureItem {
            x: stft(&clean, &self.stft_cfg)?,
            v: stft(&noise, &self.stft_cfg)?,
            y: stft(&noisy, &self.stft_cfg)?,
            mix: MixSpec {
                speech_id,
                noise_id,
                snr_db,
                gain,
                noise_offset,
                speech_offset,
            },
            clean,
            noise,
            noisy,
        })
    }
}

impl Iterator for MixtureBatches<'_> {
    type Item = Result<Vec<MixtureItem>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.opts.batch_size).min(self.order.len());
        let idx: Vec<usize> = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(idx.into_iter().map(|i| self.make_item(i)).collect())
    }
}

/// A single-kind utterance with its spectrogram.
#[derive(Debug, Clone)]
pub struct UtteranceItem {
    pub id: String,
    pub signal: TimeSignal,
    pub spec: ComplexSpectrogram,
}

/// Batches of clean speech or noise utterances of one split.
pub struct UtteranceBatches<'a> {
    corpus: &'a Corpus,
    ids: Vec<String>,
    opts: BatchOptions,
    stft_cfg: StftConfig,
    order: Vec<usize>,
    rng: ChaCha8Rng,
    pos: usize,
}

impl<'a> UtteranceBatches<'a> {
    pub fn new(corpus: &'a Corpus, kind: SignalKind, split: Split, opts: BatchOptions, stft_cfg: StftConfig, seed: u64, epoch: u64) -> Result<Self> {
        opts.validate()?;
        let ids = corpus.ids(kind, split);
        if ids.is_empty() {
            return Err(Error::invalid(format!("split {split:?} has no {kind:?} utterances")));
        }
        Ok(Self {
            order: shuffled(ids.len(), seed, epoch),
            rng: entity_rng(seed ^ 0xa11ce, 1 << 42 | epoch),
            corpus,
            ids,
            opts,
            stft_cfg,
            pos: 0,
        })
    }
}

impl Iterator for UtteranceBatches<'_> {
    type Item = Result<Vec<UtteranceItem>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.opts.batch_size).min(self.order.len());
        let idx: Vec<usize> = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(
            idx.into_iter()
                .map(|i| {
                    let id = self.ids[i].clone();
                    let (_, seg) = self.opts.crop(self.corpus.audio(&id)?, &mut self.rng);
                    let signal = TimeSignal::new(seg.to_vec())?;
                    Ok(UtteranceItem {
                        spec: stft(&signal, &self.stft_cfg)?,
                        signal,
                        id,
                    })
                })
                .collect(),
        )
    }
}

/// Spectral flatness (geometric over arithmetic mean) of the long-term
/// power spectrum.
pub fn spectral_flatness(x: &TimeSignal, cfg: &StftConfig) -> Result<f64> {
    let spec = stft(x, cfg)?;
    let f = spec.n_bins();
    let mut power = vec![0.0; f];
    for n in 0..spec.n_frames() {
        for (p, c) in power.iter_mut().zip(spec.frame(n)) {
            *p += c.norm_sqr();
        }
    }
    let band = &power[1..f - 1];
    let floor = 1e-20;
    let log_mean = band.iter().map(|p| (p + floor).ln()).sum::<f64>() / band.len() as f64;
    let mean = band.iter().sum::<f64>() / band.len() as f64 + floor;
    Ok(log_mean.exp() / mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            speakers: 10,
            test_speakers: 2,
            utterances_per_speaker: 2,
            noise_sources: 10,
            test_noise_sources: 2,
            utterances_per_noise: 2,
            min_secs: 1.0,
            max_secs: 1.5,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn split_counts_follow_fractions() {
        assert_eq!(split_counts(20, [0.5, 0.4, 0.1]), [10, 8, 2]);
        assert_eq!(split_counts(10, [0.5, 0.4, 0.1]), [5, 4, 1]);
        for n in 3..50 {
            let c = split_counts(n, [0.5, 0.4, 0.1]);
            assert_eq!(c.iter().sum::<usize>(), n);
            assert!(c.iter().all(|&k| k >= 1));
            for (k, f) in c.iter().zip([0.5, 0.4, 0.1]) {
                assert!((*k as f64 - f * n as f64).abs() <= 1.0 || n < 10);
            }
        }
    }

    #[test]
    fn mix_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = TimeSignal::new((0..1000).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let v = TimeSignal::new((0..1000).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let v = TimeSignal::new(v.samples().iter().map(|x| x * (s.power() / v.power()).sqrt()).collect()).unwrap();
        let (_, g0) = mix_at_snr(&s, &v, 0.0).unwrap();
        assert!((g0 - 1.0).abs() < 1e-12);
        let (noisy, g10) = mix_at_snr(&s, &v, 10.0).unwrap();
        assert!((g10 - 10f64.powf(-0.5)).abs() < 1e-12);
        assert!((measured_snr_db(&s, &v, g10) - 10.0).abs() < 1e-6);
        assert_eq!(noisy.len(), 1000);
        let (clean, ginf) = mix_at_snr(&s, &v, f64::INFINITY).unwrap();
        assert_eq!(ginf, 0.0);
        assert_eq!(clean.samples(), s.samples());
    }

    #[test]
    fn mix_rejects_bad_inputs() {
        let s = TimeSignal::new(vec![1.0; 10]).unwrap();
        assert!(mix_at_snr(&s, &TimeSignal::new(vec![0.0; 10]).unwrap(), 0.0).is_err());
        assert!(mix_at_snr(&s, &TimeSignal::new(vec![1.0; 11]).unwrap(), 0.0).is_err());
    }

    #[test]
    fn fit_noise_tiles_and_crops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = TimeSignal::new((0..10).map(|i| i as f64 + 1.0).collect()).unwrap();
        let (tiled, off) = fit_noise(&n, 25, &mut rng).unwrap();
        for (i, v) in tiled.samples().iter().enumerate() {
            assert_eq!(*v, ((off + i) % 10 + 1) as f64);
        }
        let (cropped, off) = fit_noise(&n, 4, &mut rng).unwrap();
        assert_eq!(cropped.samples(), &n.samples()[off..off + 4]);
        for _ in 0..20 {
            let (same, off) = fit_noise(&n, 10, &mut rng).unwrap();
            assert_eq!((same.samples(), off), (n.samples(), 0));
        }
    }

    #[test]
    fn corpus_is_deterministic_and_disjoint() {
        let a = Corpus::synthesize(&small(), 7).unwrap();
        let b = Corpus::synthesize(&small(), 7).unwrap();
        assert_eq!(a.manifest, b.manifest);
        for e in &a.manifest.entries {
            assert_eq!(a.audio(&e.id).unwrap().samples(), b.audio(&e.id).unwrap().samples());
            let secs = a.audio(&e.id).unwrap().duration_secs();
            assert!((1.0..=1.5).contains(&secs));
        }
        assert!(a.manifest.leaked_sources().is_empty());
        for split in Split::ALL {
            assert!(!a.ids(SignalKind::Speech, split).is_empty());
            assert!(!a.ids(SignalKind::Noise, split).is_empty());
        }
        let c = Corpus::synthesize(&small(), 8).unwrap();
        let id = &a.manifest.entries[0].id;
        assert_ne!(a.audio(id).unwrap().samples(), c.audio(id).unwrap().samples());
    }

    #[test]
    fn noise_is_flatter_than_speech() {
        let corpus = Corpus::synthesize(&small(), 11).unwrap();
        let cfg = StftConfig::default();
        let mean_flatness = |kind| {
            let ids = corpus.manifest.entries.iter().filter(|e| e.kind == kind).map(|e| e.id.clone()).collect::<Vec<_>>();
            ids.iter()
                .map(|id| spectral_flatness(corpus.audio(id).unwrap(), &cfg).unwrap())
                .sum::<f64>()
                / ids.len() as f64
        };
        let speech = mean_flatness(SignalKind::Speech);
        let noise = mean_flatness(SignalKind::Noise);
        assert!(noise > speech, "noise {noise} speech {speech}");
    }

    #[test]
    fn batches_are_deterministic_and_consistent() {
        let corpus = Corpus::synthesize(&small(), 5).unwrap();
        let opts = BatchOptions {
            batch_size: 3,
            snr_range: (-5.0, 5.0),
            segment_secs: None,
        };
        let cfg = StftConfig::default();
        let run = || -> Vec<Vec<MixtureItem>> {
            MixtureBatches::new(&corpus, Split::Pretrain, opts, cfg, 9, 0)
                .unwrap()
                .map(|b| b.unwrap())
                .collect()
        };
        let (a, b) = (run(), run());
        let n_items: usize = a.iter().map(Vec::len).sum();
        assert_eq!(n_items, corpus.ids(SignalKind::Speech, Split::Pretrain).len());
        assert!(a[..a.len() - 1].iter().all(|batch| batch.len() == 3));
        for (ba, bb) in a.iter().zip(&b) {
            for (ia, ib) in ba.iter().zip(bb) {
                assert_eq!(ia.mix, ib.mix);
                assert!((measured_snr_db(&ia.clean, &ia.noise, 1.0) - ia.mix.snr_db).abs() < 1e-6);
                let y = stft(&ia.noisy, &cfg).unwrap();
                let sum = ia.x.combine(1.0, &ia.v, 1.0).unwrap();
                for (p, q) in y.data().iter().zip(sum.data()) {
                    assert!((p - q).norm() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn empty_split_is_rejected() {
        let mut corpus = Corpus::synthesize(&small(), 5).unwrap();
        corpus.manifest.entries.retain(|e| e.split != Split::Test);
        let r = UtteranceBatches::new(&corpus, SignalKind::Speech, Split::Test, BatchOptions::default(), StftConfig::default(), 1, 0);
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn written_corpus_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let m1 = synth_corpus(&small(), 3, dir.path()).unwrap();
        let loaded = Corpus::load(dir.path()).unwrap();
        assert_eq!(loaded.manifest, m1);
        let dir2 = tempfile::tempdir().unwrap();
        synth_corpus(&small(), 3, dir2.path()).unwrap();
        for e in &m1.entries {
            assert_eq!(fs::read(dir.path().join(&e.path)).unwrap(), fs::read(dir2.path().join(&e.path)).unwrap());
        }
    }
}
