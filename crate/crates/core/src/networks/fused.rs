//! Batch normalization followed by PReLU as one custom op.

use std::sync::{Arc, Mutex};

use candle_core::{CpuStorage, CustomOp2, DType, Layout, Shape, Tensor, WithDType};

use crate::error::Result;

/// Normalization statistics: batch statistics in training, fixed running
/// statistics at inference.
#[derive(Debug, Clone)]
pub enum Stats {
    Batch { eps: f64, observed: Arc<Mutex<Option<(Vec<f64>, Vec<f64>)>>> },
    Fixed { mean: Vec<f64>, var: Vec<f64>, eps: f64 },
}

/// `y = prelu(gamma * (x - mean) / sqrt(var + eps) + beta)` per channel over
/// `(rows, C)`; the second argument packs `[gamma; beta; slope]` as `(3, C)`.
#[derive(Debug, Clone)]
pub struct BnPrelu {
    pub stats: Stats,
}

struct Prepared {
    mean: Vec<f64>,
    inv: Vec<f64>,
}

fn slice<'a, T: WithDType>(s: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("bn-prelu expects contiguous inputs"),
    }
}

fn batch_stats<T: WithDType>(x: &[T], c: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / c;
    let mut mean = vec![0.0; c];
    for row in x.chunks_exact(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v.to_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0; c];
    for row in x.chunks_exact(c) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v.to_f64() - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s /= rows as f64);
    (mean, var)
}

impl BnPrelu {
    fn prepare<T: WithDType>(&self, x: &[T], c: usize, record: bool) -> Prepared {
        let (mean, var, eps) = match &self.stats {
            Stats::Fixed { mean, var, eps } => (mean.clone(), var.clone(), *eps),
            Stats::Batch { eps, observed } => {
                let (mean, var) = batch_stats(x, c);
                if record {
                    *observed.lock().expect("stats lock") = Some((mean.clone(), var.clone()));
                }
                (mean, var, *eps)
            }
        };
        let inv = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        Prepared { mean, inv }
    }

    fn forward<T: WithDType>(&self, x: &[T], p: &[T], c: usize) -> Vec<T> {
        let pr = self.prepare(x, c, true);
        let (gamma, rest) = p.split_at(c);
        let (beta, slope) = rest.split_at(c);
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks_exact(c) {
            for j in 0..c {
                let z = gamma[j].to_f64() * (row[j].to_f64() - pr.mean[j]) * pr.inv[j] + beta[j].to_f64();
                out.push(T::from_f64(if z > 0.0 { z } else { slope[j].to_f64() * z }));
            }
        }
        out
    }

    fn backward<T: WithDType>(&self, x: &[T], p: &[T], gy: &[T], c: usize) -> (Vec<T>, Vec<T>) {
        let pr = self.prepare(x, c, false);
        let rows = x.len() / c;
        let (gamma, rest) = p.split_at(c);
        let (beta, slope) = rest.split_at(c);
        let mut g_gamma = vec![0.0; c];
        let mut g_beta = vec![0.0; c];
        let mut g_slope = vec![0.0; c];
        // gradient with respect to the normalized input, before centering
        let mut g_hat = vec![0.0f64; x.len()];
        for (r, row) in x.chunks_exact(c).enumerate() {
            for j in 0..c {
                let i = r * c + j;
                let hat = (row[j].to_f64() - pr.mean[j]) * pr.inv[j];
                let z = gamma[j].to_f64() * hat + beta[j].to_f64();
                let g = gy[i].to_f64();
                let gz = if z > 0.0 {
                    g
                } else {
                    g_slope[j] += g * z;
                    g * slope[j].to_f64()
                };
                g_gamma[j] += gz * hat;
                g_beta[j] += gz;
                g_hat[i] = gz * gamma[j].to_f64();
            }
        }
        let gx: Vec<T> = match self.stats {
            Stats::Fixed { .. } => g_hat
                .iter()
                .enumerate()
                .map(|(i, g)| T::from_f64(g * pr.inv[i % c]))
                .collect(),
            Stats::Batch { .. } => {
                let mut mean_g = vec![0.0; c];
                let mut mean_gh = vec![0.0; c];
                for (r, row) in x.chunks_exact(c).enumerate() {
                    for j in 0..c {
                        let hat = (row[j].to_f64() - pr.mean[j]) * pr.inv[j];
                        mean_g[j] += g_hat[r * c + j];
                        mean_gh[j] += g_hat[r * c + j] * hat;
                    }
                }
                let n = rows as f64;
                x.chunks_exact(c)
                    .enumerate()
                    .flat_map(|(r, row)| {
                        let (g_hat, mean_g, mean_gh, pr) = (&g_hat, &mean_g, &mean_gh, &pr);
                        (0..c).map(move |j| {
                            let hat = (row[j].to_f64() - pr.mean[j]) * pr.inv[j];
                            let g = g_hat[r * c + j] - mean_g[j] / n - hat * mean_gh[j] / n;
                            T::from_f64(g * pr.inv[j])
                        })
                    })
                    .collect()
            }
        };
        let gp = g_gamma.into_iter().chain(g_beta).chain(g_slope).map(T::from_f64).collect();
        (gx, gp)
    }
}

fn to_vec<T: WithDType>(t: &Tensor) -> candle_core::Result<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

impl CustomOp2 for BnPrelu {
    fn name(&self) -> &'static str {
        "bn-prelu"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let c = l2.shape().dims2()?.1;
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(p)) => CpuStorage::F32(self.forward(slice(x, l1)?, slice(p, l2)?, c)),
            (CpuStorage::F64(x), CpuStorage::F64(p)) => CpuStorage::F64(self.forward(slice(x, l1)?, slice(p, l2)?, c)),
            _ => candle_core::bail!("bn-prelu supports matching f32 or f64 inputs"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        p: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let c = p.dim(1)?;
        let (gx, gp) = match x.dtype() {
            DType::F32 => {
                let (a, b) = self.backward(&to_vec::<f32>(x)?, &to_vec::<f32>(p)?, &to_vec::<f32>(grad)?, c);
                (Tensor::from_vec(a, x.shape(), x.device())?, Tensor::from_vec(b, p.shape(), p.device())?)
            }
            DType::F64 => {
                let (a, b) = self.backward(&to_vec::<f64>(x)?, &to_vec::<f64>(p)?, &to_vec::<f64>(grad)?, c);
                (Tensor::from_vec(a, x.shape(), x.device())?, Tensor::from_vec(b, p.shape(), p.device())?)
            }
            other => candle_core::bail!("bn-prelu does not support {other:?}"),
        };
        Ok((Some(gx), Some(gp)))
    }
}

impl BnPrelu {
    pub fn apply(&self, x: &Tensor, packed: &Tensor) -> Result<Tensor> {
        Ok(x.contiguous()?.apply_op2(&packed.contiguous()?, self.clone())?)
    }
}
