//! Patch gathering for the frequency convolutions as a single custom op,
//! with a scatter-add backward.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

use crate::error::Result;

/// Output `(B, T, F_out, taps * C)`: tap `k` at `(t, j)` reads input
/// `(t + dt_k, stride * j + df_k)`, zero outside the input.
#[derive(Debug, Clone)]
pub struct Gather {
    pub taps: Vec<(isize, isize)>,
    pub stride: usize,
    pub f_out: usize,
}

#[derive(Debug, Clone)]
struct Scatter {
    gather: Gather,
    f_in: usize,
}

fn source(g: &Gather, t: usize, j: usize, k: usize, tn: usize, fn_: usize) -> Option<(usize, usize)> {
    let (dt, df) = g.taps[k];
    let ts = t as isize + dt;
    let fs = (g.stride * j) as isize + df;
    (ts >= 0 && (ts as usize) < tn && fs >= 0 && (fs as usize) < fn_).then(|| (ts as usize, fs as usize))
}

fn gather_slice<T: WithDType>(g: &Gather, x: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
    let (b, t, f, c) = dims;
    let k = g.taps.len();
    let mut out = vec![T::zero(); b * t * g.f_out * k * c];
    let mut o = 0;
    for bi in 0..b {
        for ti in 0..t {
            for j in 0..g.f_out {
                for ki in 0..k {
                    if let Some((ts, fs)) = source(g, ti, j, ki, t, f) {
                        let s = ((bi * t + ts) * f + fs) * c;
                        out[o..o + c].copy_from_slice(&x[s..s + c]);
                    }
                    o += c;
                }
            }
        }
    }
    out
}

fn scatter_slice<T: WithDType>(s: &Scatter, y: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
    let (b, t, _, kc) = dims;
    let g = &s.gather;
    let k = g.taps.len();
    let c = kc / k;
    let f = s.f_in;
    let mut out = vec![T::zero(); b * t * f * c];
    let mut o = 0;
    for bi in 0..b {
        for ti in 0..t {
            for j in 0..g.f_out {
                for ki in 0..k {
                    if let Some((ts, fs)) = source(g, ti, j, ki, t, f) {
                        let d = ((bi * t + ts) * f + fs) * c;
                        for (acc, v) in out[d..d + c].iter_mut().zip(&y[o..o + c]) {
                            *acc += *v;
                        }
                    }
                    o += c;
                }
            }
        }
    }
    out
}

fn contiguous<'a, T: WithDType>(s: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("gather expects a contiguous input"),
    }
}

impl CustomOp1 for Gather {
    fn name(&self) -> &'static str {
        "freq-gather"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims4()?;
        let (b, t, _, c) = dims;
        let shape = Shape::from((b, t, self.f_out, self.taps.len() * c));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(gather_slice(self, contiguous(v, layout)?, dims)),
            CpuStorage::F64(v) => CpuStorage::F64(gather_slice(self, contiguous(v, layout)?, dims)),
            _ => candle_core::bail!("gather supports f32 and f64"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let f_in = arg.dim(2)?;
        let op = Scatter { gather: self.clone(), f_in };
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&op)?))
    }
}

impl CustomOp1 for Scatter {
    fn name(&self) -> &'static str {
        "freq-scatter"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims4()?;
        let (b, t, _, kc) = dims;
        let shape = Shape::from((b, t, self.f_in, kc / self.gather.taps.len()));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(scatter_slice(self, contiguous(v, layout)?, dims)),
            CpuStorage::F64(v) => CpuStorage::F64(scatter_slice(self, contiguous(v, layout)?, dims)),
            _ => candle_core::bail!("scatter supports f32 and f64"),
        };
        Ok((out, shape))
    }
}

impl Gather {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.contiguous()?.apply_op1(self.clone())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn backward_is_adjoint_of_gather() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 3, 8, 3), &dev).unwrap()).unwrap();
        let g = Gather { taps: vec![(-1, -2), (0, 1), (0, 3), (-1, 0)], stride: 2, f_out: 4 };
        let y = g.apply(x.as_tensor()).unwrap();
        let w = Tensor::randn(0f64, 1.0, y.dims(), &dev).unwrap();
        let lhs = (&y * &w).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        let grads = (&y * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let gx = grads.get(x.as_tensor()).unwrap();
        let rhs = (gx * x.as_tensor()).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}
