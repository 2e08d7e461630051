//! Training objectives.
//!
//! Tensor versions carry gradients and are what the training loops use. The
//! scalar versions take plain spectrograms, distributions and signals.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{ComplexDiagGaussian, GaussianTensors};
use crate::networks::SpecBatch;
use crate::spectral::{ComplexSpectrogram, TimeSignal};

/// Added under square roots so magnitude gradients stay finite at zero.
const MAG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub beta: f64,
    pub alpha: f64,
    pub adv_weight: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 0.01,
            alpha: 1.0,
            adv_weight: 1.0,
            epsilon: 1e-8,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta", self.beta),
            ("alpha", self.alpha),
            ("adv_weight", self.adv_weight),
            ("epsilon", self.epsilon),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// `(1/N) sum_n ||X_n - Xh_n||^2 + || |X_n| - |Xh_n| ||^2` for `(N, F)` inputs.
pub fn recon_loss_tensor(est_re: &Tensor, est_im: &Tensor, ref_re: &Tensor, ref_im: &Tensor) -> Result<Tensor> {
    let n = est_re.dim(0)? as f64;
    let complex = ((est_re - ref_re)?.sqr()? + (est_im - ref_im)?.sqr()?)?;
    let mag = |re: &Tensor, im: &Tensor| -> Result<Tensor> { Ok((re.sqr()? + im.sqr()?)?.affine(1.0, MAG_EPS)?.sqrt()?) };
    let magnitude = (mag(est_re, est_im)? - mag(ref_re, ref_im)?)?.sqr()?;
    Ok((complex + magnitude)?.sum_all()?.affine(1.0 / n, 0.0)?)
}

fn mean_of(items: Vec<Tensor>) -> Result<Tensor> {
    let n = items.len() as f64;
    Ok(Tensor::stack(&items, 0)?.sum_all()?.affine(1.0 / n, 0.0)?)
}

/// Per-item reconstruction loss over valid frames, averaged over the batch.
pub fn batch_recon_loss(est: &SpecBatch, reference: &SpecBatch) -> Result<Tensor> {
    if est.lengths != reference.lengths || est.re.dims() != reference.re.dims() {
        return Err(Error::invalid("estimate and reference batches differ in shape"));
    }
    let items = (0..est.batch_size())
        .map(|i| {
            let (er, ei) = est.item(i)?;
            let (rr, ri) = reference.item(i)?;
            recon_loss_tensor(&er, &ei, &rr, &ri)
        })
        .collect::<Result<Vec<_>>>()?;
    mean_of(items)
}

fn frame_mean(per_frame: &Tensor, lengths: &[usize]) -> Result<Tensor> {
    let items = lengths
        .iter()
        .enumerate()
        .map(|(i, &n)| Ok(per_frame.get(i)?.narrow(0, 0, n)?.mean_all()?))
        .collect::<Result<Vec<_>>>()?;
    mean_of(items)
}

/// Frame-averaged `KL(q || prior)` for `(B, T, L)` posteriors, batch mean.
pub fn batch_kl_to_prior(q: &GaussianTensors, lengths: &[usize]) -> Result<Tensor> {
    frame_mean(&q.kl_to_prior()?, lengths)
}

/// Frame-averaged `KL(q || p)`, batch mean. `p` is treated as a constant.
pub fn batch_kl_between(q: &GaussianTensors, p: &GaussianTensors, lengths: &[usize]) -> Result<Tensor> {
    frame_mean(&q.kl_between(&p.detach())?, lengths)
}

#[derive(Debug, Clone)]
pub struct PretrainTerms {
    pub total: Tensor,
    pub recon: Tensor,
    pub kl: Tensor,
}

pub fn pretrain_loss_tensor(q: &GaussianTensors, est: &SpecBatch, reference: &SpecBatch, beta: f64) -> Result<PretrainTerms> {
    let recon = batch_recon_loss(est, reference)?;
    let kl = batch_kl_to_prior(q, &reference.lengths)?;
    Ok(PretrainTerms {
        total: (&recon + kl.affine(beta, 0.0)?)?,
        recon,
        kl,
    })
}

#[derive(Debug, Clone)]
pub struct NsvaeTerms {
    pub total: Tensor,
    pub speech: Tensor,
    pub noise: Tensor,
}

pub fn nsvae_loss_tensor(
    speech_q: &GaussianTensors,
    speech_p: &GaussianTensors,
    noise_q: &GaussianTensors,
    noise_p: &GaussianTensors,
    lengths: &[usize],
    alpha: f64,
) -> Result<NsvaeTerms> {
    let speech = batch_kl_between(speech_q, speech_p, lengths)?;
    let noise = batch_kl_between(noise_q, noise_p, lengths)?;
    let total = if alpha == 0.0 {
        speech.clone()
    } else {
        (&speech + noise.affine(alpha, 0.0)?)?
    };
    Ok(NsvaeTerms { total, speech, noise })
}

/// Negative SI-SDR in dB of 1-D `est` against `reference`.
///
/// Both energies are taken relative to the estimate energy before `eps` is
/// added, so the value is exactly invariant to rescaling the estimate and
/// bottoms out near `-10 log10(1 / eps)` for a perfect estimate.
pub fn si_sdr_loss_tensor(est: &Tensor, reference: &Tensor, eps: f64) -> Result<Tensor> {
    let ref_energy = reference.sqr()?.sum_all()?;
    let scale = ((est * reference)?.sum_all()? / &ref_energy)?;
    let target = reference.broadcast_mul(&scale)?;
    let distortion = (&target - est)?;
    let est_energy = est.sqr()?.sum_all()?.add(&ref_energy.affine(1e-12, 0.0)?)?;
    let num = (target.sqr()?.sum_all()? / &est_energy)?.affine(1.0, eps)?;
    let den = (distortion.sqr()?.sum_all()? / &est_energy)?.affine(1.0, eps)?;
    Ok((num / den)?.log()?.affine(-10.0 / std::f64::consts::LN_10, 0.0)?)
}

/// Least-squares GAN terms `(generator, discriminator)`.
pub fn adversarial_losses_tensor(disc_real: &Tensor, disc_fake: &Tensor) -> Result<(Tensor, Tensor)> {
    let gen = disc_fake.affine(1.0, -1.0)?.sqr()?.mean_all()?.affine(0.5, 0.0)?;
    let disc = (disc_real.affine(1.0, -1.0)?.sqr()?.mean_all()? + disc_fake.sqr()?.mean_all()?)?.affine(0.5, 0.0)?;
    Ok((gen, disc))
}

fn same_shape(a: &ComplexSpectrogram, b: &ComplexSpectrogram) -> Result<()> {
    if (a.n_bins(), a.n_frames()) != (b.n_bins(), b.n_frames()) {
        return Err(Error::invalid(format!(
            "spectrogram shapes differ: {}x{} vs {}x{}",
            a.n_bins(),
            a.n_frames(),
            b.n_bins(),
            b.n_frames()
        )));
    }
    Ok(())
}

pub fn recon_loss(est: &ComplexSpectrogram, reference: &ComplexSpectrogram) -> Result<f64> {
    same_shape(est, reference)?;
    let total: f64 = est
        .data()
        .iter()
        .zip(reference.data())
        .map(|(e, r)| (e - r).norm_sqr() + (r.norm() - e.norm()).powi(2))
        .sum();
    Ok(total / est.n_frames() as f64)
}

fn frames_to_tensors(dists: &[ComplexDiagGaussian]) -> Result<GaussianTensors> {
    let first = dists.first().ok_or_else(|| Error::invalid("empty distribution sequence"))?;
    let l = first.dim();
    if dists.iter().any(|d| d.dim() != l) {
        return Err(Error::invalid("distributions in a sequence differ in dimension"));
    }
    let n = dists.len();
    let collect = |f: &dyn Fn(&ComplexDiagGaussian, usize) -> f64| -> Result<Tensor> {
        let v: Vec<f64> = dists.iter().flat_map(|d| (0..l).map(move |i| f(d, i))).collect();
        Ok(Tensor::from_vec(v, (n, l), &Device::Cpu)?)
    };
    Ok(GaussianTensors {
        mu_re: collect(&|d, i| d.mu()[i].re)?,
        mu_im: collect(&|d, i| d.mu()[i].im)?,
        sigma: collect(&|d, i| d.sigma()[i])?,
        delta_re: collect(&|d, i| d.delta()[i].re)?,
        delta_im: collect(&|d, i| d.delta()[i].im)?,
    })
}

/// `recon_loss + beta * mean_n KL(q_n || prior)`.
pub fn pretrain_loss(
    dists: &[ComplexDiagGaussian],
    est: &ComplexSpectrogram,
    reference: &ComplexSpectrogram,
    w: &LossWeights,
) -> Result<f64> {
    if dists.len() != reference.n_frames() {
        return Err(Error::invalid(format!(
            "{} distributions for {} frames",
            dists.len(),
            reference.n_frames()
        )));
    }
    let kl = dists.iter().map(ComplexDiagGaussian::kl_to_prior).sum::<f64>() / dists.len() as f64;
    Ok(recon_loss(est, reference)? + w.beta * kl)
}

/// Frame-averaged `KL(speech_q || speech_p) + alpha * KL(noise_q || noise_p)`.
pub fn nsvae_loss(
    speech_q: &[ComplexDiagGaussian],
    speech_p: &[ComplexDiagGaussian],
    noise_q: &[ComplexDiagGaussian],
    noise_p: &[ComplexDiagGaussian],
    w: &LossWeights,
) -> Result<f64> {
    let n = speech_q.len();
    if [speech_p.len(), noise_q.len(), noise_p.len()].iter().any(|&m| m != n) {
        return Err(Error::invalid("nsvae sequences differ in length"));
    }
    let sq = frames_to_tensors(speech_q)?;
    let sp = frames_to_tensors(speech_p)?;
    let speech = scalar(&sq.kl_between(&sp)?.mean_all()?)?;
    if w.alpha == 0.0 {
        return Ok(speech);
    }
    let nq = frames_to_tensors(noise_q)?;
    let np = frames_to_tensors(noise_p)?;
    Ok(speech + w.alpha * scalar(&nq.kl_between(&np)?.mean_all()?)?)
}

fn check_pair(est: &TimeSignal, reference: &TimeSignal) -> Result<()> {
    if est.len() != reference.len() {
        return Err(Error::invalid(format!(
            "signal lengths differ: {} vs {}",
            est.len(),
            reference.len()
        )));
    }
    Ok(())
}

pub fn si_sdr_loss(est: &TimeSignal, reference: &TimeSignal, eps: f64) -> Result<f64> {
    check_pair(est, reference)?;
    if reference.energy() <= eps {
        return Err(Error::invalid("SI-SDR reference has (near) zero energy"));
    }
    let dev = Device::Cpu;
    let e = Tensor::from_slice(est.samples(), est.len(), &dev)?;
    let r = Tensor::from_slice(reference.samples(), reference.len(), &dev)?;
    scalar(&si_sdr_loss_tensor(&e, &r, eps)?)
}

/// `(generator, discriminator)` least-squares GAN terms for scalar scores.
pub fn adversarial_losses(disc_real: f64, disc_fake: f64) -> (f64, f64) {
    let gen = 0.5 * (disc_fake - 1.0).powi(2);
    let disc = 0.5 * (disc_real - 1.0).powi(2) + 0.5 * disc_fake.powi(2);
    (gen, disc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{Complex64, StftConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(values: Vec<Complex64>, frames: usize) -> ComplexSpectrogram {
        ComplexSpectrogram::from_frames(StftConfig::default(), frames, values, None).unwrap()
    }

    fn random_spec(rng: &mut ChaCha8Rng, frames: usize) -> ComplexSpectrogram {
        spec(
            (0..frames * 257)
                .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect(),
            frames,
        )
    }

    #[test]
    fn recon_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_spec(&mut rng, 3);
        assert_eq!(recon_loss(&x, &x).unwrap(), 0.0);

        let mut one = vec![Complex64::new(0.0, 0.0); 257];
        one[5] = Complex64::new(1.0, 0.0);
        let zero = spec(vec![Complex64::new(0.0, 0.0); 257], 1);
        assert!((recon_loss(&zero, &spec(one, 1)).unwrap() - 2.0).abs() < 1e-12);

        let theta: f64 = 0.7;
        let rot = Complex64::from_polar(1.0, theta);
        let xr = spec(x.data().iter().map(|c| c * rot).collect(), 3);
        let energy: f64 = x.data().iter().map(|c| c.norm_sqr()).sum();
        let expected = energy * (rot - 1.0).norm_sqr() / 3.0;
        assert!((recon_loss(&xr, &x).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn recon_rejects_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(recon_loss(&random_spec(&mut rng, 2), &random_spec(&mut rng, 3)).is_err());
    }

    #[test]
    fn pretrain_loss_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_spec(&mut rng, 2);
        let y = random_spec(&mut rng, 2);
        let q = vec![
            ComplexDiagGaussian::new(vec![Complex64::new(0.5, -0.2)], vec![1.5], vec![Complex64::new(0.1, 0.1)]).unwrap();
            2
        ];
        let r = recon_loss(&y, &x).unwrap();
        let w0 = LossWeights { beta: 0.0, ..Default::default() };
        assert_eq!(pretrain_loss(&q, &y, &x, &w0).unwrap(), r);
        let std = vec![ComplexDiagGaussian::standard(1); 2];
        let w1 = LossWeights { beta: 1.0, ..Default::default() };
        assert!((pretrain_loss(&std, &y, &x, &w1).unwrap() - r).abs() < 1e-12);
    }

    #[test]
    fn nsvae_alpha_zero_ignores_noise() {
        let a = vec![ComplexDiagGaussian::new(vec![Complex64::new(0.3, 0.0)], vec![0.7], vec![Complex64::new(0.0, 0.2)]).unwrap()];
        let b = vec![ComplexDiagGaussian::standard(1)];
        let c = vec![ComplexDiagGaussian::new(vec![Complex64::new(-2.0, 1.0)], vec![3.0], vec![Complex64::new(1.0, 0.0)]).unwrap()];
        let w = LossWeights { alpha: 0.0, ..Default::default() };
        assert_eq!(nsvae_loss(&a, &b, &b, &b, &w).unwrap(), nsvae_loss(&a, &b, &c, &b, &w).unwrap());
        assert!(nsvae_loss(&a, &a, &c, &c, &LossWeights::default()).unwrap().abs() < 1e-12);
        assert!(nsvae_loss(&a, &b, &[], &b, &w).is_err());
    }

    #[test]
    fn si_sdr_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xs = TimeSignal::new(x.clone()).unwrap();
        let perfect = si_sdr_loss(&xs, &xs, 1e-8).unwrap();
        assert!(perfect.is_finite() && perfect < -70.0);
        let doubled = TimeSignal::new(x.iter().map(|v| 2.0 * v).collect()).unwrap();
        assert!((si_sdr_loss(&doubled, &xs, 1e-8).unwrap() - perfect).abs() < 1e-9);

        let raw: Vec<f64> = (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let proj = raw.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() / xs.energy();
        let mut e: Vec<f64> = raw.iter().zip(&x).map(|(a, b)| a - proj * b).collect();
        let scale = (0.1 * xs.energy() / e.iter().map(|v| v * v).sum::<f64>()).sqrt();
        e.iter_mut().for_each(|v| *v *= scale);
        let est = TimeSignal::new(x.iter().zip(&e).map(|(a, b)| a + b).collect()).unwrap();
        assert!((si_sdr_loss(&est, &xs, 1e-8).unwrap() + 10.0).abs() < 1e-6);
    }

    #[test]
    fn si_sdr_rejects_bad_input() {
        let a = TimeSignal::new(vec![0.0; 10]).unwrap();
        let b = TimeSignal::new(vec![1.0; 10]).unwrap();
        assert!(si_sdr_loss(&b, &a, 1e-8).is_err());
        assert!(si_sdr_loss(&b, &TimeSignal::new(vec![1.0; 11]).unwrap(), 1e-8).is_err());
    }

    #[test]
    fn adversarial_examples() {
        assert_eq!(adversarial_losses(1.0, 0.0).1, 0.0);
        assert_eq!(adversarial_losses(0.3, 1.0).0, 0.0);
    }
}
