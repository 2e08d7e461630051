use candle_core::{DType, Device, Tensor};

use super::StftConfig;
use crate::error::{Error, Result};

/// Differentiable inverse STFT for one utterance, matching [`super::istft`].
///
/// Each frame is synthesized by a real matmul against a windowed inverse
/// DFT basis restricted to the first `frame_length` samples, then frames are
/// overlap-added by splitting them into hop-sized chunks and summing
/// shifted copies.
#[derive(Debug, Clone)]
pub struct IstftOperator {
    cfg: StftConfig,
    basis_re: Tensor,
    basis_im: Tensor,
}

impl IstftOperator {
    pub fn new(cfg: &StftConfig, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let n_fft = cfg.fft_length;
        let n_bins = cfg.num_bins();
        let window = cfg.window();
        let mut re = Vec::with_capacity(n_bins * cfg.frame_length);
        let mut im = Vec::with_capacity(n_bins * cfg.frame_length);
        for k in 0..n_bins {
            let weight = if k == 0 || 2 * k == n_fft { 1.0 } else { 2.0 } / n_fft as f64;
            for (t, w) in window.iter().enumerate() {
                let ang = 2.0 * std::f64::consts::PI * ((k * t) % n_fft) as f64 / n_fft as f64;
                re.push(weight * ang.cos() * w);
                im.push(-weight * ang.sin() * w);
            }
        }
        let shape = (n_bins, cfg.frame_length);
        Ok(Self {
            cfg: *cfg,
            basis_re: Tensor::from_vec(re, shape, device)?.to_dtype(dtype)?,
            basis_im: Tensor::from_vec(im, shape, device)?.to_dtype(dtype)?,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    /// `re`, `im`: `(frames, bins)`. Returns a `(out_len,)` tensor.
    pub fn forward(&self, re: &Tensor, im: &Tensor, out_len: usize) -> Result<Tensor> {
        let (n_frames, n_bins) = re.dims2()?;
        if n_bins != self.cfg.num_bins() || im.dims2()? != (n_frames, n_bins) {
            return Err(Error::invalid(format!(
                "istft input has {n_bins} bins, config implies {}",
                self.cfg.num_bins()
            )));
        }
        let hop = self.cfg.hop;
        let frames = (re.matmul(&self.basis_re)? + im.matmul(&self.basis_im)?)?;
        let chunks = self.cfg.frame_length.div_ceil(hop);
        let frames = frames
            .pad_with_zeros(1, 0, chunks * hop - self.cfg.frame_length)?
            .reshape((n_frames, chunks, hop))?;
        let mut acc: Option<Tensor> = None;
        for k in 0..chunks {
            let part = frames
                .narrow(1, k, 1)?
                .reshape((n_frames, hop))?
                .pad_with_zeros(0, k, chunks - 1 - k)?;
            acc = Some(match acc {
                None => part,
                Some(a) => (a + part)?,
            });
        }
        let span = (n_frames + chunks - 1) * hop;
        let acc = acc.expect("at least one chunk").reshape(span)?;

        let mut norm = self.cfg.synthesis_normalizer(n_frames);
        norm.resize(span, 0.0);
        let norm = Tensor::from_vec(norm, span, re.device())?.to_dtype(re.dtype())?;
        let signal = (acc * norm)?;

        let pad = self.cfg.front_pad();
        if pad + out_len <= span {
            Ok(signal.narrow(0, pad, out_len)?)
        } else {
            Ok(signal
                .narrow(0, pad, span - pad)?
                .pad_with_zeros(0, 0, pad + out_len - span)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{istft, stft, TimeSignal};
    use rand::{Rng, SeedableRng};

    #[test]
    fn matches_fft_inverse() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for hop in [300, 100] {
            let cfg = StftConfig {
                hop,
                ..StftConfig::default()
            };
            let x = TimeSignal::new((0..3217).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let spec = stft(&x, &cfg).unwrap();
            let n = spec.n_frames();
            let re: Vec<f64> = spec.data().iter().map(|c| c.re).collect();
            let im: Vec<f64> = spec.data().iter().map(|c| c.im).collect();
            let dev = Device::Cpu;
            let op = IstftOperator::new(&cfg, DType::F64, &dev).unwrap();
            let y = op
                .forward(
                    &Tensor::from_vec(re, (n, 257), &dev).unwrap(),
                    &Tensor::from_vec(im, (n, 257), &dev).unwrap(),
                    x.len(),
                )
                .unwrap()
                .to_vec1::<f64>()
                .unwrap();
            let reference = istft(&spec).unwrap();
            for (a, b) in y.iter().zip(reference.samples()) {
                assert!((a - b).abs() < 1e-10);
            }
            for (a, b) in y.iter().zip(x.samples()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
