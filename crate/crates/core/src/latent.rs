//! Complex diagonal Gaussians with a relation (pseudo-variance) vector.
//!
//! Each latent dimension is a complex scalar `z` with mean `mu`, variance
//! `sigma = E|z - mu|^2` and relation `delta = E[(z - mu)^2]`. Everything is
//! computed through the equivalent real bivariate Gaussian of
//! `(Re z, Im z)` with covariance
//!
//! ```text
//! 1/2 * [[sigma + Re delta, Im delta], [Im delta, sigma - Re delta]]
//! ```
//!
//! which is positive definite while `|delta| < sigma`.
//!
//! The tensor form ([`GaussianTensors`]) is the one code path: it is used by
//! training, and the scalar [`ComplexDiagGaussian`] API evaluates through it
//! in double precision.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::spectral::Complex64;

/// Margin keeping `|delta| <= (1 - EPS_PSD) * sigma`.
pub const EPS_PSD: f64 = 1e-6;

/// Bound applied to the raw log-variance before exponentiation.
pub const LOG_VARIANCE_CLAMP: f64 = 10.0;

/// Entries of the symmetric 2x2 real covariance per latent dimension.
#[derive(Debug, Clone)]
pub struct RealCovariance {
    pub c11: Tensor,
    pub c12: Tensor,
    pub c22: Tensor,
}

impl RealCovariance {
    pub fn det(&self) -> Result<Tensor> {
        Ok(((&self.c11 * &self.c22)? - self.c12.sqr()?)?)
    }
}

/// Batched complex diagonal Gaussian parameters. All five tensors share one
/// shape whose last axis is the latent dimension.
#[derive(Debug, Clone)]
pub struct GaussianTensors {
    pub mu_re: Tensor,
    pub mu_im: Tensor,
    pub sigma: Tensor,
    pub delta_re: Tensor,
    pub delta_im: Tensor,
}

impl GaussianTensors {
    /// Maps unconstrained outputs into the valid region:
    /// `sigma = exp(clamp(s, -10, 10))`,
    /// `delta = sigma * (1 - EPS_PSD) * tanh(t) * e^{i phase}`, `mu = raw_mu`.
    pub fn constrain(
        raw_mu_re: &Tensor,
        raw_mu_im: &Tensor,
        raw_s: &Tensor,
        raw_t: &Tensor,
        raw_phase: &Tensor,
    ) -> Result<Self> {
        let sigma = raw_s
            .clamp(-LOG_VARIANCE_CLAMP, LOG_VARIANCE_CLAMP)?
            .exp()?;
        let radius = (raw_t.tanh()? * &sigma)?.affine(1.0 - EPS_PSD, 0.0)?;
        Ok(Self {
            mu_re: raw_mu_re.clone(),
            mu_im: raw_mu_im.clone(),
            delta_re: (&radius * raw_phase.cos()?)?,
            delta_im: (&radius * raw_phase.sin()?)?,
            sigma,
        })
    }

    /// The standard prior `N(0, I, 0)` with the given shape.
    pub fn standard(shape: &[usize], dtype: DType, device: &Device) -> Result<Self> {
        let zeros = Tensor::zeros(shape, dtype, device)?;
        Ok(Self {
            mu_re: zeros.clone(),
            mu_im: zeros.clone(),
            sigma: Tensor::ones(shape, dtype, device)?,
            delta_re: zeros.clone(),
            delta_im: zeros,
        })
    }

    pub fn dims(&self) -> &[usize] {
        self.sigma.dims()
    }

    pub fn latent_dim(&self) -> usize {
        *self.sigma.dims().last().unwrap_or(&0)
    }

    pub fn embedding(&self) -> Result<RealCovariance> {
        Ok(RealCovariance {
            c11: (&self.sigma + &self.delta_re)?.affine(0.5, 0.0)?,
            c12: self.delta_im.affine(0.5, 0.0)?,
            c22: (&self.sigma - &self.delta_re)?.affine(0.5, 0.0)?,
        })
    }

    /// `KL(self || N(0, I, 0))`, summed over the last axis:
    /// `sum sigma + |mu|^2 - 1 - 1/2 ln(4 det C)`.
    pub fn kl_to_prior(&self) -> Result<Tensor> {
        let det4 = self.embedding()?.det()?.affine(4.0, 0.0)?;
        let per_dim = ((&self.sigma + self.mu_re.sqr()?)? + self.mu_im.sqr()?)?
            .affine(1.0, -1.0)?
            .sub(&det4.log()?.affine(0.5, 0.0)?)?;
        Ok(per_dim.sum(per_dim.rank() - 1)?)
    }

    /// `KL(self || p)` as the sum over dimensions of the bivariate real
    /// Gaussian KL between the embeddings.
    pub fn kl_between(&self, p: &GaussianTensors) -> Result<Tensor> {
        if self.dims() != p.dims() {
            return Err(Error::invalid(format!(
                "distribution shapes differ: {:?} vs {:?}",
                self.dims(),
                p.dims()
            )));
        }
        let q_cov = self.embedding()?;
        let p_cov = p.embedding()?;
        let det_q = q_cov.det()?;
        let det_p = p_cov.det()?;
        let dx = (&p.mu_re - &self.mu_re)?;
        let dy = (&p.mu_im - &self.mu_im)?;
        // tr(P^-1 Q) * det P
        let trace = ((&p_cov.c22 * &q_cov.c11)? - (&p_cov.c12 * &q_cov.c12)?.affine(2.0, 0.0)?)?
            .add(&(&p_cov.c11 * &q_cov.c22)?)?;
        // (mp - mq)^T P^-1 (mp - mq) * det P
        let maha = ((&p_cov.c22 * dx.sqr()?)? - (&p_cov.c12 * (&dx * &dy)?)?.affine(2.0, 0.0)?)?
            .add(&(&p_cov.c11 * dy.sqr()?)?)?;
        let per_dim = ((trace + maha)? / &det_p)?
            .affine(1.0, -2.0)?
            .add(&(det_p.log()? - det_q.log()?)?)?
            .affine(0.5, 0.0)?;
        Ok(per_dim.sum(per_dim.rank() - 1)?)
    }

    /// Reparameterized sample `mu + A n` with `A` the lower Cholesky factor
    /// of the real covariance and `n` standard normal noise.
    pub fn sample(&self, noise_a: &Tensor, noise_b: &Tensor) -> Result<(Tensor, Tensor)> {
        let cov = self.embedding()?;
        let a11 = cov.c11.sqrt()?;
        let a21 = (&cov.c12 / &a11)?;
        let a22 = (cov.det()? / &cov.c11)?.sqrt()?;
        let z_re = (&self.mu_re + (&a11 * noise_a)?)?;
        let z_im = ((&self.mu_im + (&a21 * noise_a)?)? + (&a22 * noise_b)?)?;
        Ok((z_re, z_im))
    }

    pub fn detach(&self) -> Self {
        Self {
            mu_re: self.mu_re.detach(),
            mu_im: self.mu_im.detach(),
            sigma: self.sigma.detach(),
            delta_re: self.delta_re.detach(),
            delta_im: self.delta_im.detach(),
        }
    }

    pub fn narrow(&self, dim: usize, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            mu_re: self.mu_re.narrow(dim, start, len)?,
            mu_im: self.mu_im.narrow(dim, start, len)?,
            sigma: self.sigma.narrow(dim, start, len)?,
            delta_re: self.delta_re.narrow(dim, start, len)?,
            delta_im: self.delta_im.narrow(dim, start, len)?,
        })
    }

    pub fn get(&self, index: usize) -> Result<Self> {
        Ok(Self {
            mu_re: self.mu_re.get(index)?,
            mu_im: self.mu_im.get(index)?,
            sigma: self.sigma.get(index)?,
            delta_re: self.delta_re.get(index)?,
            delta_im: self.delta_im.get(index)?,
        })
    }

    /// Converts a `(frames, L)` tensor set into per-frame distributions.
    pub fn to_frames(&self) -> Result<Vec<ComplexDiagGaussian>> {
        let (n, _) = self.sigma.dims2()?;
        (0..n)
            .map(|i| ComplexDiagGaussian::from_tensors(&self.get(i)?))
            .collect()
    }
}

fn vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

fn tensor_f64(values: Vec<f64>) -> Result<Tensor> {
    let n = values.len();
    Ok(Tensor::from_vec(values, n, &Device::Cpu)?)
}

fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// A validated complex diagonal Gaussian over `L` dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexDiagGaussian {
    mu: Vec<Complex64>,
    sigma: Vec<f64>,
    delta: Vec<Complex64>,
}

impl ComplexDiagGaussian {
    pub fn new(mu: Vec<Complex64>, sigma: Vec<f64>, delta: Vec<Complex64>) -> Result<Self> {
        let l = mu.len();
        if l == 0 || sigma.len() != l || delta.len() != l {
            return Err(Error::invalid(format!(
                "parameter lengths differ or are empty: mu {}, sigma {}, delta {}",
                l,
                sigma.len(),
                delta.len()
            )));
        }
        for i in 0..l {
            let (m, s, d) = (mu[i], sigma[i], delta[i]);
            if !(m.re.is_finite() && m.im.is_finite() && d.re.is_finite() && d.im.is_finite()) {
                return Err(Error::invalid(format!("non-finite parameter at dimension {i}")));
            }
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::invalid(format!("variance {s} at dimension {i} is not positive")));
            }
            // relative slack absorbs rounding in the constrained parameterization
            if d.norm() > (1.0 - EPS_PSD) * s * (1.0 + 1e-12) {
                return Err(Error::invalid(format!(
                    "|delta| = {} exceeds (1 - eps) * sigma = {} at dimension {i}",
                    d.norm(),
                    (1.0 - EPS_PSD) * s
                )));
            }
        }
        Ok(Self { mu, sigma, delta })
    }

    /// `N(0, I, 0)` of dimension `dim`.
    pub fn standard(dim: usize) -> Self {
        Self {
            mu: vec![Complex64::new(0.0, 0.0); dim],
            sigma: vec![1.0; dim],
            delta: vec![Complex64::new(0.0, 0.0); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[Complex64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn delta(&self) -> &[Complex64] {
        &self.delta
    }

    pub fn to_tensors(&self) -> Result<GaussianTensors> {
        Ok(GaussianTensors {
            mu_re: tensor_f64(self.mu.iter().map(|c| c.re).collect())?,
            mu_im: tensor_f64(self.mu.iter().map(|c| c.im).collect())?,
            sigma: tensor_f64(self.sigma.clone())?,
            delta_re: tensor_f64(self.delta.iter().map(|c| c.re).collect())?,
            delta_im: tensor_f64(self.delta.iter().map(|c| c.im).collect())?,
        })
    }

    /// Reads a rank-1 tensor set back into a validated distribution.
    pub fn from_tensors(t: &GaussianTensors) -> Result<Self> {
        let zip = |re: Vec<f64>, im: Vec<f64>| -> Vec<Complex64> {
            re.into_iter().zip(im).map(|(a, b)| Complex64::new(a, b)).collect()
        };
        Self::new(
            zip(vec_f64(&t.mu_re)?, vec_f64(&t.mu_im)?),
            vec_f64(&t.sigma)?,
            zip(vec_f64(&t.delta_re)?, vec_f64(&t.delta_im)?),
        )
    }

    /// Mean 2-vector and 2x2 covariance of the real embedding of dimension `i`.
    pub fn real_embedding(&self, i: usize) -> ([f64; 2], [[f64; 2]; 2]) {
        let (m, s, d) = (self.mu[i], self.sigma[i], self.delta[i]);
        (
            [m.re, m.im],
            [
                [0.5 * (s + d.re), 0.5 * d.im],
                [0.5 * d.im, 0.5 * (s - d.re)],
            ],
        )
    }

    /// `noise` holds `2L` standard normal values, two per dimension.
    pub fn sample(&self, noise: &[f64]) -> Result<LatentSample> {
        if noise.len() != 2 * self.dim() {
            return Err(Error::invalid(format!(
                "expected {} noise values, got {}",
                2 * self.dim(),
                noise.len()
            )));
        }
        if noise.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite sampling noise"));
        }
        let a = tensor_f64(noise.iter().step_by(2).copied().collect())?;
        let b = tensor_f64(noise.iter().skip(1).step_by(2).copied().collect())?;
        let (re, im) = self.to_tensors()?.sample(&a, &b)?;
        let z = vec_f64(&re)?
            .into_iter()
            .zip(vec_f64(&im)?)
            .map(|(r, i)| Complex64::new(r, i))
            .collect();
        Ok(LatentSample { z })
    }

    pub fn kl_to_prior(&self) -> f64 {
        // valid by construction, so the tensor path cannot fail on shape
        self.to_tensors()
            .and_then(|t| t.kl_to_prior())
            .and_then(|k| scalar_f64(&k))
            .expect("kl_to_prior on a validated distribution")
    }
}

/// The standard complex prior `N(0, I, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StandardComplexPrior {
    pub dimension: usize,
}

impl StandardComplexPrior {
    pub fn distribution(&self) -> ComplexDiagGaussian {
        ComplexDiagGaussian::standard(self.dimension)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub z: Vec<Complex64>,
}

pub fn kl_to_prior(d: &ComplexDiagGaussian) -> f64 {
    d.kl_to_prior()
}

pub fn kl_between(q: &ComplexDiagGaussian, p: &ComplexDiagGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            q.dim(),
            p.dim()
        )));
    }
    scalar_f64(&q.to_tensors()?.kl_between(&p.to_tensors()?)?)
}

pub fn sample(d: &ComplexDiagGaussian, noise: &[f64]) -> Result<LatentSample> {
    d.sample(noise)
}

pub fn constrain_raw_outputs(
    raw_mu: &[Complex64],
    raw_s: &[f64],
    raw_t: &[f64],
    raw_phase: &[f64],
) -> Result<ComplexDiagGaussian> {
    let l = raw_mu.len();
    if raw_s.len() != l || raw_t.len() != l || raw_phase.len() != l {
        return Err(Error::invalid("raw output vectors have different lengths"));
    }
    let t = GaussianTensors::constrain(
        &tensor_f64(raw_mu.iter().map(|c| c.re).collect())?,
        &tensor_f64(raw_mu.iter().map(|c| c.im).collect())?,
        &tensor_f64(raw_s.to_vec())?,
        &tensor_f64(raw_t.to_vec())?,
        &tensor_f64(raw_phase.to_vec())?,
    )?;
    ComplexDiagGaussian::from_tensors(&t)
}
