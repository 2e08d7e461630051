//! Layer primitives on channels-last tensors.
//!
//! Feature maps are `(batch, time, freq, channels)`. Complex feature maps
//! store `C` complex channels as `2C` real channels laid out `[re.. | im..]`.
//! Convolutions are written as explicit patch gathering plus one matmul, so
//! the frequency stride and causal time padding need no conv kernels.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::fused::{BnPrelu, Stats};
use super::gather::Gather;
use crate::error::{Error, Result};

/// Frequency taps of every conv kernel.
pub const KERNEL_FREQ: usize = 5;
/// Time taps of every conv kernel (causal).
pub const KERNEL_TIME: usize = 2;
pub const TAPS: usize = KERNEL_FREQ * KERNEL_TIME;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    pub trainable: bool,
}

/// Named parameters of one network, kept in name order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            entries: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: String, values: Vec<f64>, shape: &[usize], trainable: bool) -> Result<Var> {
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.entries.insert(
            name,
            Param {
                var: var.clone(),
                trainable,
            },
        );
        Ok(var)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.var.clone())
            .collect()
    }

    /// Trainable variables whose names start with any of `prefixes`.
    pub fn trainable_with_prefix(&self, prefixes: &[&str]) -> Vec<Var> {
        self.entries
            .iter()
            .filter(|(n, p)| p.trainable && prefixes.iter().any(|pre| n.starts_with(pre)))
            .map(|(_, p)| p.var.clone())
            .collect()
    }

    /// Total number of scalar entries under `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, p)| p.var.elem_count())
            .sum()
    }

    /// Copies matching tensors into the store. Names absent from `tensors`
    /// keep their current values unless `strict`, in which case they are an
    /// error; shape mismatches always are.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>, strict: bool) -> Result<usize> {
        let mut loaded = 0;
        for (name, p) in &self.entries {
            match tensors.get(name) {
                Some(t) => {
                    if t.dims() != p.var.dims() {
                        return Err(Error::Config(format!(
                            "parameter {name}: checkpoint shape {:?} differs from model shape {:?}",
                            t.dims(),
                            p.var.dims()
                        )));
                    }
                    p.var.set(&t.to_dtype(self.dtype)?)?;
                    loaded += 1;
                }
                None if strict => {
                    return Err(Error::Config(format!("checkpoint lacks parameter {name}")));
                }
                None => {}
            }
        }
        Ok(loaded)
    }

    /// Deep copies of all tensors, keyed by name.
    pub fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        self.entries
            .iter()
            .map(|(n, p)| Ok((n.clone(), p.var.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Exact per-parameter value bits, for bitwise freeze checks.
    pub fn fingerprint(&self) -> Result<BTreeMap<String, Vec<u64>>> {
        self.entries
            .iter()
            .map(|(n, p)| {
                let bits = match self.dtype {
                    DType::F32 => p
                        .var
                        .flatten_all()?
                        .to_vec1::<f32>()?
                        .into_iter()
                        .map(|v| v.to_bits() as u64)
                        .collect(),
                    _ => p
                        .var
                        .flatten_all()?
                        .to_dtype(DType::F64)?
                        .to_vec1::<f64>()?
                        .into_iter()
                        .map(f64::to_bits)
                        .collect(),
                };
                Ok((n.clone(), bits))
            })
            .collect()
    }
}

/// Registers parameters under a name prefix with seeded initialization.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        let full = self.full(name);
        self.store.insert(full, values, shape, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, trainable: bool) -> Result<Var> {
        let n: usize = shape.iter().product();
        let full = self.full(name);
        self.store.insert(full, vec![value; n], shape, trainable)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.affine(0.5, 0.0)?.tanh()? * 0.5)?.affine(1.0, 0.5)?)
}

/// Collapses all leading axes, applies `x @ w + b`, restores them.
fn apply_matmul(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let in_dim = *dims.last().expect("rank >= 1");
    let rows: usize = dims[..dims.len() - 1].iter().product();
    let y = x.reshape((rows, in_dim))?.matmul(w)?;
    let y = match b {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    };
    let mut out = dims;
    *out.last_mut().expect("rank >= 1") = w.dim(1)?;
    Ok(y.reshape(out)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    w: Var,
    b: Var,
}

impl Linear {
    pub fn new(b: &mut Builder, in_dim: usize, out_dim: usize, gain: f64) -> Result<Self> {
        let bound = gain / (in_dim as f64).sqrt();
        Ok(Self {
            w: b.uniform("w", &[in_dim, out_dim], bound)?,
            b: b.constant("b", &[out_dim], 0.0, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        apply_matmul(x, self.w.as_tensor(), Some(self.b.as_tensor()))
    }
}

/// Complex affine map on `[re | im]` features.
#[derive(Debug, Clone)]
pub struct ComplexLinear {
    wr: Var,
    wi: Var,
    br: Var,
    bi: Var,
}

impl ComplexLinear {
    pub fn new(b: &mut Builder, in_dim: usize, out_dim: usize, gain: f64) -> Result<Self> {
        let bound = gain / (2.0 * in_dim as f64).sqrt();
        Ok(Self {
            wr: b.uniform("wr", &[in_dim, out_dim], bound)?,
            wi: b.uniform("wi", &[in_dim, out_dim], bound)?,
            br: b.constant("br", &[out_dim], 0.0, true)?,
            bi: b.constant("bi", &[out_dim], 0.0, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = complex_weight(self.wr.as_tensor(), self.wi.as_tensor(), 0)?;
        let bias = Tensor::cat(&[self.br.as_tensor(), self.bi.as_tensor()], 0)?;
        apply_matmul(x, &w, Some(&bias))
    }
}

/// Real weight of the complex product on `[re | im]` features:
/// rows `[re_in; im_in]`, columns `[re_out, im_out]`, so
/// `re_out = re W_r - im W_i` and `im_out = re W_i + im W_r`.
/// `axis` is the input-channel axis of `wr`/`wi` (output channels last).
fn complex_weight(wr: &Tensor, wi: &Tensor, axis: usize) -> Result<Tensor> {
    let last = wr.rank() - 1;
    let top = Tensor::cat(&[wr, wi], last)?;
    let bottom = Tensor::cat(&[&wi.neg()?, wr], last)?;
    Ok(Tensor::cat(&[&top, &bottom], axis)?)
}

/// Interleaves two complex feature maps channel-wise:
/// `[a_re, b_re | a_im, b_im]`.
pub fn complex_cat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let ca = a.dim(D::Minus1)? / 2;
    let cb = b.dim(D::Minus1)? / 2;
    let last = a.rank() - 1;
    Ok(Tensor::cat(
        &[
            &a.narrow(last, 0, ca)?,
            &b.narrow(last, 0, cb)?,
            &a.narrow(last, ca, ca)?,
            &b.narrow(last, cb, cb)?,
        ],
        last,
    )?)
}

/// Gathers the `(5, 2)` receptive field of every output position of a
/// stride-(2, 1) conv with frequency padding 2 and causal time padding 1.
/// Output: `(B, T, F/2, TAPS * C)`, taps ordered `kt * 5 + kf`.
fn patches_downsample(x: &Tensor) -> Result<Tensor> {
    let f = x.dim(2)?;
    if f % 2 != 0 {
        return Err(Error::invalid(format!("frequency axis {f} is not even")));
    }
    let mut taps = Vec::with_capacity(TAPS);
    for kt in 0..KERNEL_TIME as isize {
        for kf in 0..KERNEL_FREQ as isize {
            taps.push((kt + 1 - KERNEL_TIME as isize, kf - 2));
        }
    }
    Gather { taps, stride: 2, f_out: f / 2 }.apply(x)
}

/// Input gathers for the two output phases of a stride-(2, 1) transposed
/// conv with kernel (5, 2), padding 2 and output padding 1: even outputs
/// `2j` read inputs `j+1, j, j-1` through taps `kf = 0, 2, 4`, odd outputs
/// `2j+1` read `j+1, j` through `kf = 1, 3`.
fn patches_upsample(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let f = x.dim(2)?;
    let phase = |offsets: &[isize]| {
        let mut taps = Vec::new();
        for kt in 0..KERNEL_TIME as isize {
            for &off in offsets {
                taps.push((kt + 1 - KERNEL_TIME as isize, off));
            }
        }
        Gather { taps, stride: 1, f_out: f }.apply(x)
    };
    Ok((phase(&[1, 0, -1])?, phase(&[1, 0])?))
}

const EVEN_TAPS: [u32; 6] = [0, 2, 4, 5, 7, 9];
const ODD_TAPS: [u32; 4] = [1, 3, 6, 8];

/// Conv weight stored per tap: `(TAPS, in, out)` real channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    /// Stride 2 in frequency (encoder / discriminator).
    Down,
    /// Transposed, stride 2 in frequency (decoder).
    Up,
}

fn conv_apply(x: &Tensor, w_taps: &Tensor, bias: &Tensor, kind: ConvKind) -> Result<Tensor> {
    let (_, cin, cout) = w_taps.dims3()?;
    match kind {
        ConvKind::Down => {
            let p = patches_downsample(x)?;
            let w = w_taps.reshape((TAPS * cin, cout))?;
            apply_matmul(&p, &w, Some(bias))
        }
        ConvKind::Up => {
            let (b, t, f, _) = x.dims4()?;
            let (pe, po) = patches_upsample(x)?;
            let dev = x.device();
            let we = w_taps
                .index_select(&Tensor::new(&EVEN_TAPS, dev)?, 0)?
                .reshape((6 * cin, cout))?;
            let wo = w_taps
                .index_select(&Tensor::new(&ODD_TAPS, dev)?, 0)?
                .reshape((4 * cin, cout))?;
            let ye = apply_matmul(&pe, &we, Some(bias))?;
            let yo = apply_matmul(&po, &wo, Some(bias))?;
            Ok(Tensor::stack(&[ye, yo], 3)?.reshape((b, t, 2 * f, cout))?)
        }
    }
}

/// Complex convolution. Input channels may be split into a main group and
/// an optional skip group (concatenated with [`complex_cat`]); both are
/// separate parameters so a checkpoint without skips loads into the main
/// group.
#[derive(Debug, Clone)]
pub struct ComplexConv {
    kind: ConvKind,
    wr: Var,
    wi: Var,
    skip: Option<(Var, Var)>,
    br: Var,
    bi: Var,
}

impl ComplexConv {
    pub fn new(
        b: &mut Builder,
        kind: ConvKind,
        cin: usize,
        cskip: usize,
        cout: usize,
        zero_skip: bool,
    ) -> Result<Self> {
        let bound = 1.0 / ((2 * TAPS * (cin + cskip)) as f64).sqrt();
        let wr = b.uniform("wr", &[TAPS, cin, cout], bound)?;
        let wi = b.uniform("wi", &[TAPS, cin, cout], bound)?;
        let skip = if cskip > 0 {
            if zero_skip {
                Some((
                    b.constant("skip_wr", &[TAPS, cskip, cout], 0.0, true)?,
                    b.constant("skip_wi", &[TAPS, cskip, cout], 0.0, true)?,
                ))
            } else {
                Some((
                    b.uniform("skip_wr", &[TAPS, cskip, cout], bound)?,
                    b.uniform("skip_wi", &[TAPS, cskip, cout], bound)?,
                ))
            }
        } else {
            None
        };
        Ok(Self {
            kind,
            wr,
            wi,
            skip,
            br: b.constant("br", &[cout], 0.0, true)?,
            bi: b.constant("bi", &[cout], 0.0, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (wr, wi) = match &self.skip {
            Some((sr, si)) => (
                Tensor::cat(&[self.wr.as_tensor(), sr.as_tensor()], 1)?,
                Tensor::cat(&[self.wi.as_tensor(), si.as_tensor()], 1)?,
            ),
            None => (self.wr.as_tensor().clone(), self.wi.as_tensor().clone()),
        };
        let w = complex_weight(&wr, &wi, 1)?;
        let bias = Tensor::cat(&[self.br.as_tensor(), self.bi.as_tensor()], 0)?;
        conv_apply(x, &w, &bias, self.kind)
    }

    pub fn zero_output(&self) -> Result<()> {
        for v in [&self.wr, &self.wi, &self.br, &self.bi] {
            v.set(&v.zeros_like()?)?;
        }
        if let Some((a, b)) = &self.skip {
            a.set(&a.zeros_like()?)?;
            b.set(&b.zeros_like()?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RealConv {
    w: Var,
    b: Var,
}

impl RealConv {
    pub fn new(b: &mut Builder, cin: usize, cout: usize) -> Result<Self> {
        let bound = 1.0 / ((TAPS * cin) as f64).sqrt();
        Ok(Self {
            w: b.uniform("w", &[TAPS, cin, cout], bound)?,
            b: b.constant("b", &[cout], 0.0, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv_apply(x, self.w.as_tensor(), self.b.as_tensor(), ConvKind::Down)
    }
}

/// Per-channel batch normalization over `(batch, time, freq)`. Applied to
/// the `2C` real channels of a complex map it normalizes real and imaginary
/// parts separately.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
}

impl BatchNorm {
    pub fn new(b: &mut Builder, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.constant("gamma", &[channels], 1.0, true)?,
            beta: b.constant("beta", &[channels], 0.0, true)?,
            running_mean: b.constant("running_mean", &[channels], 0.0, false)?,
            running_var: b.constant("running_var", &[channels], 1.0, false)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = x.dim(D::Minus1)?;
        let rows = x.elem_count() / c;
        let (mean, var) = match mode {
            Mode::Train => {
                let flat = x.reshape((rows, c))?;
                let mean = flat.mean(0)?;
                let centered = flat.broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean(0)?;
                let unbiased = if rows > 1 {
                    var.affine(rows as f64 / (rows - 1) as f64, 0.0)?
                } else {
                    var.clone()
                };
                let rm = ((self.running_mean.as_tensor() * (1.0 - BN_MOMENTUM))?
                    + (mean.detach() * BN_MOMENTUM)?)?;
                let rv = ((self.running_var.as_tensor() * (1.0 - BN_MOMENTUM))?
                    + (unbiased.detach() * BN_MOMENTUM)?)?;
                self.running_mean.set(&rm)?;
                self.running_var.set(&rv)?;
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.as_tensor().clone(),
                self.running_var.as_tensor().clone(),
            ),
        };
        let inv = var.affine(1.0, BN_EPS)?.sqrt()?.recip()?;
        let scale = (inv * self.gamma.as_tensor())?;
        let shift = (self.beta.as_tensor() - (&mean * &scale)?)?;
        Ok(x.broadcast_mul(&scale)?.broadcast_add(&shift)?)
    }
}

impl BatchNorm {
    /// `act(self(x))` as a single fused op; running statistics update as in
    /// [`BatchNorm::forward`].
    pub fn forward_prelu(&self, x: &Tensor, mode: Mode, act: &Prelu) -> Result<Tensor> {
        let c = x.dim(D::Minus1)?;
        let stats = match mode {
            Mode::Train => Stats::Batch { eps: BN_EPS, observed: Arc::new(Mutex::new(None)) },
            Mode::Eval => Stats::Fixed {
                mean: self.running_mean.as_tensor().to_dtype(DType::F64)?.to_vec1()?,
                var: self.running_var.as_tensor().to_dtype(DType::F64)?.to_vec1()?,
                eps: BN_EPS,
            },
        };
        let packed = Tensor::stack(&[self.gamma.as_tensor(), self.beta.as_tensor(), &act.slopes()?], 0)?;
        let op = BnPrelu { stats };
        let y = op.apply(x, &packed)?;
        if let Stats::Batch { observed, .. } = &op.stats {
            let (mean, var) = observed.lock().expect("stats lock").take().expect("forward records statistics");
            let rows = x.elem_count() / c;
            let correction = if rows > 1 { rows as f64 / (rows - 1) as f64 } else { 1.0 };
            let (dt, dev) = (x.dtype(), x.device());
            let mean = Tensor::from_vec(mean, c, dev)?.to_dtype(dt)?;
            let var = Tensor::from_vec(var, c, dev)?.to_dtype(dt)?;
            let rm = ((self.running_mean.as_tensor() * (1.0 - BN_MOMENTUM))? + (mean * BN_MOMENTUM)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - BN_MOMENTUM))? + (var * (BN_MOMENTUM * correction))?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
        }
        Ok(y)
    }
}

/// PReLU with one slope per channel; on complex maps the slope is shared by
/// the real and imaginary part of each channel.
#[derive(Debug, Clone)]
pub struct Prelu {
    slope: Var,
    complex: bool,
}

impl Prelu {
    pub fn new(b: &mut Builder, channels: usize, complex: bool) -> Result<Self> {
        Ok(Self {
            slope: b.constant("slope", &[channels], 0.25, true)?,
            complex,
        })
    }

    /// One slope per real channel.
    pub fn slopes(&self) -> Result<Tensor> {
        Ok(if self.complex {
            Tensor::cat(&[self.slope.as_tensor(), self.slope.as_tensor()], 0)?
        } else {
            self.slope.as_tensor().clone()
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let a = self.slopes()?;
        Ok((x.relu()? - x.neg()?.relu()?.broadcast_mul(&a)?)?)
    }
}

/// Unidirectional LSTM over `(B, T, in)`, gates ordered `i, f, g, o`.
#[derive(Debug, Clone)]
pub struct Lstm {
    w_ih: Var,
    w_hh: Var,
    bias: Var,
    hidden: usize,
}

impl Lstm {
    pub fn new(b: &mut Builder, in_dim: usize, hidden: usize) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            w_ih: b.uniform("w_ih", &[in_dim, 4 * hidden], bound)?,
            w_hh: b.uniform("w_hh", &[hidden, 4 * hidden], bound)?,
            bias: b.uniform("bias", &[4 * hidden], bound)?,
            hidden,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (batch, steps, _) = x.dims3()?;
        let h_dim = self.hidden;
        let xp = apply_matmul(x, self.w_ih.as_tensor(), Some(self.bias.as_tensor()))?;
        let mut h = Tensor::zeros((batch, h_dim), x.dtype(), x.device())?;
        let mut c = h.clone();
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let gates = (xp.narrow(1, t, 1)?.squeeze(1)? + h.matmul(self.w_hh.as_tensor())?)?;
            let i = sigmoid(&gates.narrow(1, 0, h_dim)?)?;
            let f = sigmoid(&gates.narrow(1, h_dim, h_dim)?)?;
            let g = gates.narrow(1, 2 * h_dim, h_dim)?.tanh()?;
            let o = sigmoid(&gates.narrow(1, 3 * h_dim, h_dim)?)?;
            c = ((f * &c)? + (i * g)?)?;
            h = (o * c.tanh()?)?;
            outputs.push(h.clone());
        }
        Ok(Tensor::stack(&outputs, 1)?)
    }
}

/// Split-complex LSTM: two real LSTMs `R`, `I` applied to the real and
/// imaginary input streams and recombined as
/// `re = R(x_re) - I(x_im)`, `im = R(x_im) + I(x_re)`.
#[derive(Debug, Clone)]
pub struct ComplexLstm {
    real: Lstm,
    imag: Lstm,
}

impl ComplexLstm {
    pub fn new(b: &mut Builder, in_dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            real: Lstm::new(&mut b.sub("real"), in_dim, hidden)?,
            imag: Lstm::new(&mut b.sub("imag"), in_dim, hidden)?,
        })
    }

    /// `(B, T, 2 in)` to `(B, T, 2 hidden)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let batch = x.dim(0)?;
        let n = x.dim(2)? / 2;
        let stacked = Tensor::cat(&[x.narrow(2, 0, n)?, x.narrow(2, n, n)?], 0)?;
        let r = self.real.forward(&stacked)?;
        let i = self.imag.forward(&stacked)?;
        let (r_re, r_im) = (r.narrow(0, 0, batch)?, r.narrow(0, batch, batch)?);
        let (i_re, i_im) = (i.narrow(0, 0, batch)?, i.narrow(0, batch, batch)?);
        Ok(Tensor::cat(&[(r_re - i_im)?, (r_im + i_re)?], 2)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store_and_rng() -> (ParamStore, ChaCha8Rng) {
        (ParamStore::new(DType::F64), ChaCha8Rng::seed_from_u64(0))
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn at(t: &Tensor, idx: [usize; 4]) -> f64 {
        t.get(idx[0])
            .unwrap()
            .get(idx[1])
            .unwrap()
            .get(idx[2])
            .unwrap()
            .get(idx[3])
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    /// Direct loops for the strided conv over a single real channel pair.
    #[test]
    fn downsample_conv_matches_direct_sum() {
        let (mut store, mut rng) = store_and_rng();
        let conv = RealConv::new(&mut Builder::new(&mut store, &mut rng), 3, 2).unwrap();
        let x = randn(&[1, 4, 8, 3], 1);
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.dims(), &[1, 4, 4, 2]);
        let w = conv.w.as_tensor();
        for t in 0..4 {
            for fo in 0..4 {
                for co in 0..2 {
                    let mut acc = 0.0;
                    for kt in 0..2 {
                        let ti = t as i64 + kt as i64 - 1;
                        if ti < 0 {
                            continue;
                        }
                        for kf in 0..5 {
                            let fi = 2 * fo as i64 + kf as i64 - 2;
                            if !(0..8).contains(&fi) {
                                continue;
                            }
                            for ci in 0..3 {
                                let wv = w.get(kt * 5 + kf).unwrap().get(ci).unwrap().get(co).unwrap();
                                acc += wv.to_scalar::<f64>().unwrap()
                                    * at(&x, [0, ti as usize, fi as usize, ci]);
                            }
                        }
                    }
                    assert!((acc - at(&y, [0, t, fo, co])).abs() < 1e-12);
                }
            }
        }
    }

    /// The upsampling conv equals a transposed conv: scatter each input
    /// through every tap at `2i + kf - 2`.
    #[test]
    fn upsample_conv_matches_transposed_scatter() {
        let (mut store, mut rng) = store_and_rng();
        let mut b = Builder::new(&mut store, &mut rng);
        let w = b.uniform("w", &[TAPS, 2, 3], 0.5).unwrap();
        let bias = Tensor::zeros(3, DType::F64, &Device::Cpu).unwrap();
        let x = randn(&[1, 3, 4, 2], 2);
        let y = conv_apply(&x, w.as_tensor(), &bias, ConvKind::Up).unwrap();
        assert_eq!(y.dims(), &[1, 3, 8, 3]);
        let mut expect = vec![0.0; 3 * 8 * 3];
        for t in 0..3 {
            for kt in 0..2 {
                let to = t + 1 - kt;
                if to >= 3 {
                    continue;
                }
                for i in 0..4 {
                    for kf in 0..5 {
                        let o = 2 * i as i64 + kf as i64 - 2;
                        if !(0..8).contains(&o) {
                            continue;
                        }
                        for ci in 0..2 {
                            for co in 0..3 {
                                let wv = w.get(kt * 5 + kf).unwrap().get(ci).unwrap().get(co).unwrap();
                                expect[(to * 8 + o as usize) * 3 + co] +=
                                    wv.to_scalar::<f64>().unwrap() * at(&x, [0, t, i, ci]);
                            }
                        }
                    }
                }
            }
        }
        let got = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn complex_linear_is_complex_product() {
        let (mut store, mut rng) = store_and_rng();
        let lin = ComplexLinear::new(&mut Builder::new(&mut store, &mut rng), 1, 1, 1.0).unwrap();
        lin.wr.set(&Tensor::new(&[[2.0f64]], &Device::Cpu).unwrap()).unwrap();
        lin.wi.set(&Tensor::new(&[[3.0f64]], &Device::Cpu).unwrap()).unwrap();
        // (1 + 2i)(2 + 3i) = -4 + 7i
        let y = lin.forward(&Tensor::new(&[[1.0f64, 2.0]], &Device::Cpu).unwrap()).unwrap();
        assert_eq!(y.to_vec2::<f64>().unwrap(), vec![vec![-4.0, 7.0]]);
    }

    #[test]
    fn batch_norm_train_normalizes_and_updates_running_stats() {
        let (mut store, mut rng) = store_and_rng();
        let bn = BatchNorm::new(&mut Builder::new(&mut store, &mut rng), 2).unwrap();
        let x = (randn(&[2, 5, 4, 2], 3) * 3.0).unwrap().affine(1.0, 2.0).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap().reshape((40, 2)).unwrap();
        let m = y.mean(0).unwrap().to_vec1::<f64>().unwrap();
        assert!(m.iter().all(|v| v.abs() < 1e-12));
        let rm = bn.running_mean.as_tensor().to_vec1::<f64>().unwrap();
        assert!(rm.iter().all(|v| (v - 0.2).abs() < 0.1));
        // eval mode does not touch the running statistics
        let before = store.fingerprint().unwrap();
        bn.forward(&x, Mode::Eval).unwrap();
        assert_eq!(before, store.fingerprint().unwrap());
    }

    #[test]
    fn fused_bn_prelu_matches_composition() {
        for mode in [Mode::Train, Mode::Eval] {
            let build = || {
                let (mut store, mut rng) = store_and_rng();
                let mut b = Builder::new(&mut store, &mut rng);
                let bn = BatchNorm::new(&mut b.sub("bn"), 6).unwrap();
                let act = Prelu::new(&mut b.sub("act"), 3, true).unwrap();
                bn.gamma.set(&randn(&[6], 11).affine(1.0, 1.0).unwrap()).unwrap();
                bn.beta.set(&randn(&[6], 12)).unwrap();
                bn.running_mean.set(&randn(&[6], 13)).unwrap();
                bn.running_var.set(&randn(&[6], 14).affine(0.5, 1.0).unwrap()).unwrap();
                act.slope.set(&randn(&[3], 15)).unwrap();
                (store, bn, act)
            };
            let x = Var::from_tensor(&(randn(&[2, 5, 4, 6], 3) * 3.0).unwrap()).unwrap();
            let w = randn(&[2, 5, 4, 6], 4);
            let mut results = Vec::new();
            for fused in [false, true] {
                let (store, bn, act) = build();
                let y = if fused {
                    bn.forward_prelu(x.as_tensor(), mode, &act).unwrap()
                } else {
                    act.forward(&bn.forward(x.as_tensor(), mode).unwrap()).unwrap()
                };
                let loss = (&y * &w).unwrap().sum_all().unwrap();
                let grads = loss.backward().unwrap();
                let mut flat = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
                flat.extend(grads.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap());
                for v in [&bn.gamma, &bn.beta, &act.slope] {
                    flat.extend(grads.get(v.as_tensor()).unwrap().to_vec1::<f64>().unwrap());
                }
                for v in [&bn.running_mean, &bn.running_var] {
                    flat.extend(v.as_tensor().to_vec1::<f64>().unwrap());
                }
                drop(store);
                results.push(flat);
            }
            for (a, b) in results[0].iter().zip(&results[1]) {
                assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()), "{mode:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn lstm_is_causal() {
        let (mut store, mut rng) = store_and_rng();
        let lstm = ComplexLstm::new(&mut Builder::new(&mut store, &mut rng), 3, 4).unwrap();
        let x = randn(&[2, 6, 6], 4);
        let y = lstm.forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 6, 8]);
        let x2 = Tensor::cat(&[x.narrow(1, 0, 4).unwrap(), randn(&[2, 2, 6], 9)], 1).unwrap();
        let y2 = lstm.forward(&x2).unwrap();
        let a = y.narrow(1, 0, 4).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = y2.narrow(1, 0, 4).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn duplicate_names_rejected() {
        let (mut store, mut rng) = store_and_rng();
        let mut b = Builder::new(&mut store, &mut rng);
        b.constant("x", &[1], 0.0, true).unwrap();
        assert!(b.constant("x", &[1], 0.0, true).is_err());
    }
}
