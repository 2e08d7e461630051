//! Complex encoder/decoder/discriminator topologies.
//!
//! Encoder: the DC bin is dropped (257 -> 256 bins), six complex conv blocks
//! (conv, split batch norm, PReLU) halve the frequency axis to 4, a
//! split-complex LSTM runs over frames and linear heads emit one latent
//! Gaussian per frame. The dual-head variant shares the trunk and adds a
//! second head for the noise latent.
//!
//! Decoder: complex LSTM, projection back to `4 x C6`, six transposed
//! complex conv blocks in mirrored order, DC restored as zero. With skip
//! connections each stage also consumes the matching encoder block output.

pub mod checkpoint;
mod fused;
mod gather;
pub mod nn;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{ComplexDiagGaussian, GaussianTensors, LatentSample};
use crate::spectral::{Complex64, ComplexMask, ComplexSpectrogram, StftConfig};
use nn::{
    complex_cat, BatchNorm, Builder, ComplexConv, ComplexLinear, ComplexLstm, ConvKind, Linear,
    Lstm, Mode, ParamStore, Prelu, RealConv,
};

pub const NUM_STAGES: usize = 6;
/// Bins entering the first conv block once DC is dropped.
pub const CONV_BINS: usize = 256;
/// Frequency extent after six stride-2 stages.
pub const BOTTLENECK_BINS: usize = CONV_BINS >> NUM_STAGES;

const HEAD_GAIN: f64 = 0.1;

/// Architecture shared by every network of one experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub channels: Vec<usize>,
    pub latent_dim: usize,
    pub lstm_hidden: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            channels: vec![32, 64, 128, 128, 256, 256],
            latent_dim: 128,
            lstm_hidden: 256,
        }
    }
}

impl NetworkConfig {
    pub fn desk() -> Self {
        Self {
            channels: vec![8, 16, 32, 32, 64, 64],
            latent_dim: 32,
            lstm_hidden: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != NUM_STAGES || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config(format!(
                "expected {NUM_STAGES} positive conv channel counts, got {:?}",
                self.channels
            )));
        }
        if self.latent_dim == 0 || self.lstm_hidden == 0 {
            return Err(Error::Config("latent_dim and lstm_hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn encoder(&self, dual_head: bool) -> EncoderConfig {
        EncoderConfig {
            channels: self.channels.clone(),
            kernel: (nn::KERNEL_FREQ, nn::KERNEL_TIME),
            stride: (2, 1),
            latent_dim: self.latent_dim,
            lstm_hidden: self.lstm_hidden,
            dual_head,
        }
    }
}

/// Kernel `(freq, time)` and stride `(freq, time)` are fixed at `(5, 2)` and
/// `(2, 1)`; they are recorded for completeness.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub channels: Vec<usize>,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub latent_dim: usize,
    pub lstm_hidden: usize,
    pub dual_head: bool,
}

/// Batched spectrograms `(B, T, F)`, zero-padded to the longest item.
#[derive(Debug, Clone)]
pub struct SpecBatch {
    pub re: Tensor,
    pub im: Tensor,
    pub lengths: Vec<usize>,
}

impl SpecBatch {
    pub fn from_spectrograms(specs: &[&ComplexSpectrogram], dtype: DType, device: &Device) -> Result<Self> {
        let first = specs.first().ok_or_else(|| Error::invalid("empty spectrogram batch"))?;
        let f = first.n_bins();
        if specs.iter().any(|s| s.n_bins() != f) {
            return Err(Error::invalid("spectrograms in one batch have different bin counts"));
        }
        let t_max = specs.iter().map(|s| s.n_frames()).max().unwrap_or(0);
        let mut re = vec![0.0; specs.len() * t_max * f];
        let mut im = vec![0.0; specs.len() * t_max * f];
        for (b, s) in specs.iter().enumerate() {
            for (k, c) in s.data().iter().enumerate() {
                re[b * t_max * f + k] = c.re;
                im[b * t_max * f + k] = c.im;
            }
        }
        let shape = (specs.len(), t_max, f);
        Ok(Self {
            re: Tensor::from_vec(re, shape, device)?.to_dtype(dtype)?,
            im: Tensor::from_vec(im, shape, device)?.to_dtype(dtype)?,
            lengths: specs.iter().map(|s| s.n_frames()).collect(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    /// Item `i` trimmed to its own length: `(N_i, F)` real and imaginary parts.
    pub fn item(&self, i: usize) -> Result<(Tensor, Tensor)> {
        let n = self.lengths[i];
        Ok((self.re.get(i)?.narrow(0, 0, n)?, self.im.get(i)?.narrow(0, 0, n)?))
    }

    fn item_values(&self, i: usize) -> Result<Vec<Complex64>> {
        let (re, im) = self.item(i)?;
        let re = re.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let im = im.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(re.into_iter().zip(im).map(|(a, b)| Complex64::new(a, b)).collect())
    }

    pub fn to_spectrogram(&self, i: usize, config: StftConfig, signal_len: Option<usize>) -> Result<ComplexSpectrogram> {
        ComplexSpectrogram::from_frames(config, self.lengths[i], self.item_values(i)?, signal_len)
    }

    pub fn to_mask(&self, i: usize) -> Result<ComplexMask> {
        Ok(ComplexMask {
            n_bins: self.re.dim(2)?,
            n_frames: self.lengths[i],
            values: self.item_values(i)?,
        })
    }

    pub fn detach(&self) -> Self {
        Self {
            re: self.re.detach(),
            im: self.im.detach(),
            lengths: self.lengths.clone(),
        }
    }
}

/// Encoder block outputs, one per conv stage, shallowest first.
#[derive(Debug, Clone)]
pub struct SkipPack {
    stages: Vec<Tensor>,
}

impl SkipPack {
    pub fn new(stages: Vec<Tensor>) -> Result<Self> {
        if stages.len() != NUM_STAGES {
            return Err(Error::invalid(format!(
                "skip pack needs {NUM_STAGES} stages, got {}",
                stages.len()
            )));
        }
        Ok(Self { stages })
    }

    pub fn stages(&self) -> &[Tensor] {
        &self.stages
    }

    pub fn detach(&self) -> Self {
        Self {
            stages: self.stages.iter().map(Tensor::detach).collect(),
        }
    }
}

fn spec_to_features(spec: &SpecBatch) -> Result<Tensor> {
    let f = spec.re.dim(2)?;
    if f != CONV_BINS + 1 {
        return Err(Error::invalid(format!(
            "networks expect {} frequency bins, got {f}",
            CONV_BINS + 1
        )));
    }
    let re = spec.re.narrow(2, 1, CONV_BINS)?.unsqueeze(3)?;
    let im = spec.im.narrow(2, 1, CONV_BINS)?.unsqueeze(3)?;
    Ok(Tensor::cat(&[re, im], 3)?)
}

/// `(B, T, 4, 2C)` complex map to `(B, T, 2 * 4C)` `[re | im]` frame features.
fn flatten_complex(x: &Tensor) -> Result<Tensor> {
    let (b, t, f, c2) = x.dims4()?;
    let c = c2 / 2;
    let re = x.narrow(3, 0, c)?.reshape((b, t, f * c))?;
    let im = x.narrow(3, c, c)?.reshape((b, t, f * c))?;
    Ok(Tensor::cat(&[re, im], 2)?)
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv: ComplexConv,
    bn: BatchNorm,
    act: Prelu,
}

impl ConvBlock {
    fn new(b: &mut Builder, kind: ConvKind, cin: usize, cskip: usize, cout: usize, zero_skip: bool) -> Result<Self> {
        Ok(Self {
            conv: ComplexConv::new(&mut b.sub("conv"), kind, cin, cskip, cout, zero_skip)?,
            bn: BatchNorm::new(&mut b.sub("bn"), 2 * cout)?,
            act: Prelu::new(&mut b.sub("act"), cout, true)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.bn.forward_prelu(&self.conv.forward(x)?, mode, &self.act)
    }
}

#[derive(Debug, Clone)]
struct LatentHead {
    mu: ComplexLinear,
    raw: Linear,
    latent_dim: usize,
}

impl LatentHead {
    fn new(b: &mut Builder, hidden: usize, latent_dim: usize) -> Result<Self> {
        Ok(Self {
            mu: ComplexLinear::new(&mut b.sub("mu"), hidden, latent_dim, HEAD_GAIN)?,
            raw: Linear::new(&mut b.sub("raw"), 2 * hidden, 3 * latent_dim, HEAD_GAIN)?,
            latent_dim,
        })
    }

    fn forward(&self, h: &Tensor) -> Result<GaussianTensors> {
        let l = self.latent_dim;
        let mu = self.mu.forward(h)?;
        let raw = self.raw.forward(h)?;
        GaussianTensors::constrain(
            &mu.narrow(2, 0, l)?,
            &mu.narrow(2, l, l)?,
            &raw.narrow(2, 0, l)?,
            &raw.narrow(2, l, l)?,
            &raw.narrow(2, 2 * l, l)?,
        )
    }
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Speech latent `(B, T, L)`.
    pub speech: GaussianTensors,
    /// Noise latent of the dual-head encoder.
    pub noise: Option<GaussianTensors>,
    pub skips: Option<SkipPack>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    blocks: Vec<ConvBlock>,
    lstm: ComplexLstm,
    speech_head: LatentHead,
    noise_head: Option<LatentHead>,
}

impl Encoder {
    pub fn new(config: EncoderConfig, b: &mut Builder) -> Result<Self> {
        let mut blocks = Vec::with_capacity(NUM_STAGES);
        let mut cin = 1;
        for (i, &cout) in config.channels.iter().enumerate() {
            blocks.push(ConvBlock::new(&mut b.sub(&format!("block{i}")), ConvKind::Down, cin, 0, cout, false)?);
            cin = cout;
        }
        let lstm = ComplexLstm::new(&mut b.sub("lstm"), BOTTLENECK_BINS * cin, config.lstm_hidden)?;
        let speech_head = LatentHead::new(&mut b.sub("head_speech"), config.lstm_hidden, config.latent_dim)?;
        let noise_head = if config.dual_head {
            Some(LatentHead::new(&mut b.sub("head_noise"), config.lstm_hidden, config.latent_dim)?)
        } else {
            None
        };
        Ok(Self {
            config,
            blocks,
            lstm,
            speech_head,
            noise_head,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn forward(&self, spec: &SpecBatch, mode: Mode, keep_skips: bool) -> Result<EncoderOutput> {
        let mut x = spec_to_features(spec)?;
        let mut skips = Vec::new();
        for block in &self.blocks {
            x = block.forward(&x, mode)?;
            if keep_skips {
                skips.push(x.clone());
            }
        }
        let h = self.lstm.forward(&flatten_complex(&x)?)?;
        Ok(EncoderOutput {
            speech: self.speech_head.forward(&h)?,
            noise: self.noise_head.as_ref().map(|head| head.forward(&h)).transpose()?,
            skips: if keep_skips { Some(SkipPack::new(skips)?) } else { None },
        })
    }
}

#[derive(Debug, Clone)]
struct UpBlock {
    conv: ComplexConv,
    post: Option<(BatchNorm, Prelu)>,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    network: NetworkConfig,
    skip_connections: bool,
    lstm: ComplexLstm,
    proj: ComplexLinear,
    blocks: Vec<UpBlock>,
}

impl Decoder {
    /// `zero_skip` initializes the skip-channel weights at zero so a decoder
    /// pretrained without skips starts from its pretrained function.
    pub fn new(network: &NetworkConfig, skip_connections: bool, zero_skip: bool, b: &mut Builder) -> Result<Self> {
        let ch = &network.channels;
        let lstm = ComplexLstm::new(&mut b.sub("lstm"), network.latent_dim, network.lstm_hidden)?;
        let proj = ComplexLinear::new(&mut b.sub("proj"), network.lstm_hidden, BOTTLENECK_BINS * ch[NUM_STAGES - 1], 1.0)?;
        let mut blocks = Vec::with_capacity(NUM_STAGES);
        for j in 0..NUM_STAGES {
            let cin = ch[NUM_STAGES - 1 - j];
            let last = j == NUM_STAGES - 1;
            let cout = if last { 1 } else { ch[NUM_STAGES - 2 - j] };
            let cskip = if skip_connections { cin } else { 0 };
            let mut sb = b.sub(&format!("block{j}"));
            let conv = ComplexConv::new(&mut sb.sub("conv"), ConvKind::Up, cin, cskip, cout, zero_skip)?;
            let post = if last {
                None
            } else {
                Some((
                    BatchNorm::new(&mut sb.sub("bn"), 2 * cout)?,
                    Prelu::new(&mut sb.sub("act"), cout, true)?,
                ))
            };
            blocks.push(UpBlock { conv, post });
        }
        Ok(Self {
            network: network.clone(),
            skip_connections,
            lstm,
            proj,
            blocks,
        })
    }

    pub fn skip_connections(&self) -> bool {
        self.skip_connections
    }

    /// `z_re`, `z_im`: `(B, T, L)`. Returns a `(B, T, 257)` complex map.
    pub fn forward(&self, z_re: &Tensor, z_im: &Tensor, skips: Option<&SkipPack>, mode: Mode, lengths: Vec<usize>) -> Result<SpecBatch> {
        match (self.skip_connections, skips) {
            (true, None) => return Err(Error::invalid("decoder built with skip connections needs a skip pack")),
            (false, Some(_)) => return Err(Error::invalid("decoder built without skip connections got a skip pack")),
            _ => {}
        }
        let (b, t, _) = z_re.dims3()?;
        let c6 = self.network.channels[NUM_STAGES - 1];
        let h = self.lstm.forward(&Tensor::cat(&[z_re, z_im], 2)?)?;
        let p = self.proj.forward(&h)?;
        let n = BOTTLENECK_BINS * c6;
        let re = p.narrow(2, 0, n)?.reshape((b, t, BOTTLENECK_BINS, c6))?;
        let im = p.narrow(2, n, n)?.reshape((b, t, BOTTLENECK_BINS, c6))?;
        let mut x = Tensor::cat(&[re, im], 3)?;
        for (j, block) in self.blocks.iter().enumerate() {
            if let Some(pack) = skips {
                let s = &pack.stages()[NUM_STAGES - 1 - j];
                if s.dims()[..3] != x.dims()[..3] {
                    return Err(Error::invalid(format!(
                        "skip stage {} has shape {:?}, decoder expects {:?}",
                        NUM_STAGES - 1 - j,
                        s.dims(),
                        x.dims()
                    )));
                }
                x = complex_cat(&x, s)?;
            }
            x = block.conv.forward(&x)?;
            if let Some((bn, act)) = &block.post {
                x = bn.forward_prelu(&x, mode, act)?;
            }
        }
        let re = x.narrow(3, 0, 1)?.squeeze(3)?.pad_with_zeros(2, 1, 0)?;
        let im = x.narrow(3, 1, 1)?.squeeze(3)?.pad_with_zeros(2, 1, 0)?;
        Ok(SpecBatch { re, im, lengths })
    }

    /// Zeroes the output stage so the decoder emits an all-zero map.
    pub fn zero_output_stage(&self) -> Result<()> {
        self.blocks[NUM_STAGES - 1].conv.zero_output()
    }
}

#[derive(Debug, Clone)]
struct RealBlock {
    conv: RealConv,
    bn: BatchNorm,
    act: Prelu,
}

/// Six real conv blocks over `(re, im)` input channels, a real LSTM and a
/// scalar head averaged over frames.
#[derive(Debug, Clone)]
pub struct Discriminator {
    blocks: Vec<RealBlock>,
    lstm: Lstm,
    head: Linear,
}

impl Discriminator {
    pub fn new(network: &NetworkConfig, b: &mut Builder) -> Result<Self> {
        let mut blocks = Vec::with_capacity(NUM_STAGES);
        let mut cin = 2;
        for (i, &cout) in network.channels.iter().enumerate() {
            let mut sb = b.sub(&format!("block{i}"));
            blocks.push(RealBlock {
                conv: RealConv::new(&mut sb.sub("conv"), cin, cout)?,
                bn: BatchNorm::new(&mut sb.sub("bn"), cout)?,
                act: Prelu::new(&mut sb.sub("act"), cout, false)?,
            });
            cin = cout;
        }
        Ok(Self {
            blocks,
            lstm: Lstm::new(&mut b.sub("lstm"), BOTTLENECK_BINS * cin, network.lstm_hidden)?,
            head: Linear::new(&mut b.sub("head"), network.lstm_hidden, 1, 1.0)?,
        })
    }

    /// One score per item: the mean over its valid frames.
    pub fn forward(&self, spec: &SpecBatch, mode: Mode) -> Result<Tensor> {
        let mut x = spec_to_features(spec)?;
        for block in &self.blocks {
            x = block.bn.forward_prelu(&block.conv.forward(&x)?, mode, &block.act)?;
        }
        let (b, t, f, c) = x.dims4()?;
        let h = self.lstm.forward(&x.reshape((b, t, f * c))?)?;
        let frame_scores = self.head.forward(&h)?.squeeze(2)?;
        let scores = spec
            .lengths
            .iter()
            .enumerate()
            .map(|(i, &n)| frame_scores.get(i)?.narrow(0, 0, n)?.mean(0))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Tensor::stack(&scores, 0)?)
    }
}

/// What a decoder output is interpreted as.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputMode {
    Spectrogram,
    Mask,
}

#[derive(Debug, Clone)]
pub enum Decoded {
    Spectrogram(ComplexSpectrogram),
    Mask(ComplexMask),
}

fn latent_batch(z: &[LatentSample], dtype: DType) -> Result<(Tensor, Tensor)> {
    let n = z.len();
    let l = z.first().ok_or_else(|| Error::invalid("empty latent sequence"))?.z.len();
    if z.iter().any(|s| s.z.len() != l) {
        return Err(Error::invalid("latent samples have different dimensions"));
    }
    let re: Vec<f64> = z.iter().flat_map(|s| s.z.iter().map(|c| c.re)).collect();
    let im: Vec<f64> = z.iter().flat_map(|s| s.z.iter().map(|c| c.im)).collect();
    let dev = Device::Cpu;
    Ok((
        Tensor::from_vec(re, (1, n, l), &dev)?.to_dtype(dtype)?,
        Tensor::from_vec(im, (1, n, l), &dev)?.to_dtype(dtype)?,
    ))
}

/// Pretrained VAE (speech or noise): encoder and decoder in one store,
/// parameter names prefixed `enc.` and `dec.`.
#[derive(Debug, Clone)]
pub struct VaeModel {
    pub network: NetworkConfig,
    pub skip_connections: bool,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl VaeModel {
    pub fn new(network: &NetworkConfig, skip_connections: bool, dtype: DType, seed: u64) -> Result<Self> {
        network.validate()?;
        let mut store = ParamStore::new(dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let encoder = Encoder::new(network.encoder(false), &mut b.sub("enc"))?;
        let decoder = Decoder::new(network, skip_connections, false, &mut b.sub("dec"))?;
        Ok(Self {
            network: network.clone(),
            skip_connections,
            store,
            encoder,
            decoder,
        })
    }

    /// Per-frame posteriors of one utterance (inference mode) and, when
    /// requested, the encoder skip pack.
    pub fn encode(&self, spec: &ComplexSpectrogram, use_skips: bool) -> Result<(Vec<ComplexDiagGaussian>, Option<SkipPack>)> {
        let batch = SpecBatch::from_spectrograms(&[spec], self.store.dtype(), self.store.device())?;
        let out = self.encoder.forward(&batch, Mode::Eval, use_skips)?;
        Ok((out.speech.get(0)?.to_frames()?, out.skips))
    }

    pub fn decode(&self, z: &[LatentSample], skips: Option<&SkipPack>, mode: OutputMode, config: StftConfig, signal_len: Option<usize>) -> Result<Decoded> {
        let (re, im) = latent_batch(z, self.store.dtype())?;
        let out = self.decoder.forward(&re, &im, skips, Mode::Eval, vec![z.len()])?;
        Ok(match mode {
            OutputMode::Spectrogram => Decoded::Spectrogram(out.to_spectrogram(0, config, signal_len)?),
            OutputMode::Mask => Decoded::Mask(out.to_mask(0)?),
        })
    }

    /// Decodes the posterior means of one utterance.
    pub fn reconstruct(&self, spec: &ComplexSpectrogram) -> Result<ComplexSpectrogram> {
        let batch = SpecBatch::from_spectrograms(&[spec], self.store.dtype(), self.store.device())?;
        let enc = self.encoder.forward(&batch, Mode::Eval, self.skip_connections)?;
        let out = self.decoder.forward(
            &enc.speech.mu_re,
            &enc.speech.mu_im,
            enc.skips.as_ref(),
            Mode::Eval,
            batch.lengths.clone(),
        )?;
        out.to_spectrogram(0, *spec.config(), spec.signal_len())
    }
}

/// Noise-suppression encoder: dual-head encoder, names prefixed `enc.`.
#[derive(Debug, Clone)]
pub struct NsvaeModel {
    pub network: NetworkConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
}

impl NsvaeModel {
    pub fn new(network: &NetworkConfig, dtype: DType, seed: u64) -> Result<Self> {
        network.validate()?;
        let mut store = ParamStore::new(dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(network.encoder(true), &mut Builder::new(&mut store, &mut rng).sub("enc"))?;
        Ok(Self {
            network: network.clone(),
            store,
            encoder,
        })
    }
}

/// Decoder fine-tuned to emit complex masks, names prefixed `dec.`.
#[derive(Debug, Clone)]
pub struct MaskDecoderModel {
    pub network: NetworkConfig,
    pub store: ParamStore,
    pub decoder: Decoder,
}

impl MaskDecoderModel {
    pub fn new(network: &NetworkConfig, skip_connections: bool, dtype: DType, seed: u64) -> Result<Self> {
        network.validate()?;
        let mut store = ParamStore::new(dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let decoder = Decoder::new(network, skip_connections, true, &mut Builder::new(&mut store, &mut rng).sub("dec"))?;
        Ok(Self {
            network: network.clone(),
            store,
            decoder,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DiscriminatorModel {
    pub network: NetworkConfig,
    pub store: ParamStore,
    pub disc: Discriminator,
}

impl DiscriminatorModel {
    pub fn new(network: &NetworkConfig, dtype: DType, seed: u64) -> Result<Self> {
        network.validate()?;
        let mut store = ParamStore::new(dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let disc = Discriminator::new(network, &mut Builder::new(&mut store, &mut rng).sub("disc"))?;
        Ok(Self {
            network: network.clone(),
            store,
            disc,
        })
    }

    pub fn discriminate(&self, spec: &ComplexSpectrogram) -> Result<f64> {
        let batch = SpecBatch::from_spectrograms(&[spec], self.store.dtype(), self.store.device())?;
        let s = self.disc.forward(&batch, Mode::Eval)?;
        Ok(s.get(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{stft, TimeSignal};
    use rand::Rng;

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            channels: vec![2, 2, 4, 4, 4, 4],
            latent_dim: 3,
            lstm_hidden: 5,
        }
    }

    fn random_spec(frames: usize, seed: u64) -> ComplexSpectrogram {
        let cfg = StftConfig::default();
        let len = (frames - 1) * cfg.hop + cfg.frame_length - 2 * cfg.front_pad();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = TimeSignal::new((0..len).map(|_| rng.gen_range(-0.3..0.3)).collect()).unwrap();
        let s = stft(&x, &cfg).unwrap();
        assert_eq!(s.n_frames(), frames);
        s
    }

    #[test]
    fn encoder_shapes_and_decode_round_trip_shape() {
        let net = tiny();
        let vae = VaeModel::new(&net, false, DType::F32, 1).unwrap();
        for frames in [10, 37] {
            let spec = random_spec(frames, frames as u64);
            let (dists, skips) = vae.encode(&spec, true).unwrap();
            assert_eq!(dists.len(), frames);
            assert!(dists.iter().all(|d| d.dim() == 3));
            let skips = skips.unwrap();
            let bins: Vec<usize> = skips.stages().iter().map(|s| s.dim(2).unwrap()).collect();
            assert_eq!(bins, vec![128, 64, 32, 16, 8, 4]);
            let z: Vec<LatentSample> = dists.iter().map(|d| LatentSample { z: d.mu().to_vec() }).collect();
            match vae.decode(&z, None, OutputMode::Spectrogram, *spec.config(), spec.signal_len()).unwrap() {
                Decoded::Spectrogram(s) => {
                    assert_eq!((s.n_bins(), s.n_frames()), (257, frames));
                    assert!(s.frame(0)[0].norm() == 0.0);
                }
                Decoded::Mask(_) => unreachable!(),
            }
        }
    }

    #[test]
    fn wrong_bin_count_rejected() {
        let vae = VaeModel::new(&tiny(), false, DType::F32, 1).unwrap();
        let cfg = StftConfig {
            fft_length: 1024,
            ..StftConfig::default()
        };
        let spec = stft(&TimeSignal::new(vec![0.1; 2000]).unwrap(), &cfg).unwrap();
        assert!(matches!(vae.encode(&spec, false), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn skip_presence_must_match_decoder() {
        let net = tiny();
        let plain = VaeModel::new(&net, false, DType::F32, 2).unwrap();
        let spec = random_spec(12, 3);
        let (dists, skips) = plain.encode(&spec, true).unwrap();
        let z: Vec<LatentSample> = dists.iter().map(|d| LatentSample { z: d.mu().to_vec() }).collect();
        let cfg = *spec.config();
        assert!(plain.decode(&z, skips.as_ref(), OutputMode::Spectrogram, cfg, None).is_err());
        let with = VaeModel::new(&net, true, DType::F32, 2).unwrap();
        assert!(with.decode(&z, None, OutputMode::Spectrogram, cfg, None).is_err());
        assert!(with.decode(&z, skips.as_ref(), OutputMode::Spectrogram, cfg, None).is_ok());
    }

    #[test]
    fn zero_input_gives_valid_finite_posteriors() {
        let vae = VaeModel::new(&tiny(), false, DType::F64, 4).unwrap();
        let spec = ComplexSpectrogram::zeros(StftConfig::default(), 8, None).unwrap();
        let (dists, _) = vae.encode(&spec, false).unwrap();
        for d in dists {
            assert!(d.kl_to_prior().is_finite());
        }
    }

    #[test]
    fn zeroed_output_stage_gives_zero_mask() {
        let m = MaskDecoderModel::new(&tiny(), false, DType::F32, 5).unwrap();
        m.decoder.zero_output_stage().unwrap();
        let z = Tensor::ones((1, 6, 3), DType::F32, &Device::Cpu).unwrap();
        let out = m.decoder.forward(&z, &z, None, Mode::Eval, vec![6]).unwrap();
        let mask = out.to_mask(0).unwrap();
        assert!(mask.values.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn dual_head_shares_trunk_size() {
        let net = tiny();
        let single = VaeModel::new(&net, false, DType::F32, 1).unwrap();
        let dual = NsvaeModel::new(&net, DType::F32, 1).unwrap();
        for prefix in ["enc.block", "enc.lstm", "enc.head_speech"] {
            assert_eq!(single.store.count_with_prefix(prefix), dual.store.count_with_prefix(prefix));
        }
        assert_eq!(single.store.count_with_prefix("enc.head_noise"), 0);
        assert_eq!(
            dual.store.count_with_prefix("enc.head_noise"),
            dual.store.count_with_prefix("enc.head_speech")
        );
    }

    #[test]
    fn discriminator_is_deterministic_and_finite() {
        let d = DiscriminatorModel::new(&tiny(), DType::F32, 9).unwrap();
        for frames in [10, 60, 200] {
            let spec = random_spec(frames, frames as u64 + 1);
            let a = d.discriminate(&spec).unwrap();
            let b = d.discriminate(&spec).unwrap();
            assert!(a.is_finite());
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
