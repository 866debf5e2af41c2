//! Differentiable primitives recorded on a [`Tape`].
//!
//! Image tensors use the NHWC layout throughout; convolution weights are
//! `(kh, kw, c_in, c_out)` so that a weight reshaped to `(kh·kw·c_in, c_out)`
//! multiplies an im2col patch matrix directly.

use super::gemm::{gemm, MatRef};
use super::resample::{CropBox, ResamplePlan};
use super::tape::{GradSink, Node, Op, Tape, Var};
use super::value::{split_axis, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Silu,
    Sigmoid,
    Tanh,
    Log,
    Abs,
    Square,
    Exp,
    /// `log σ(x)`, evaluated without forming σ(x).
    LogSigmoid,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Relu => "relu",
            Unary::Silu => "silu",
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::Log => "log",
            Unary::Abs => "abs",
            Unary::Square => "square",
            Unary::Exp => "exp",
            Unary::LogSigmoid => "log_sigmoid",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Silu => x * sigmoid(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Log => x.ln(),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
            Unary::Exp => x.exp(),
            Unary::LogSigmoid => x.min(0.0) - (-x.abs()).exp().ln_1p(),
        }
    }

    /// dy/dx given input `x` and output `y`. ReLU and |x| take 0 at the kink.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Log => 1.0 / x,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
            Unary::Exp => y,
            Unary::LogSigmoid => sigmoid(-x),
        }
    }
}

/// Normalisation layout: `n` samples of `hw` positions by `c` channels,
/// with statistics per sample and channel group. Layer norm is the case
/// `hw = 1, groups = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct NormLayout {
    pub n: usize,
    pub hw: usize,
    pub c: usize,
    pub groups: usize,
}

impl NormLayout {
    fn group_of(&self) -> Vec<usize> {
        let cg = self.c / self.groups;
        (0..self.c).map(|j| j / cg).collect()
    }

    fn count(&self) -> f64 {
        (self.hw * self.c / self.groups) as f64
    }

    /// Returns `(output, mean, rstd)`, statistics indexed `sample * groups + group`.
    fn forward(&self, x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let NormLayout { n, hw, c, groups } = *self;
        let gi = self.group_of();
        let count = self.count();
        let mut mean = vec![0.0; n * groups];
        let mut rstd = vec![0.0; n * groups];
        let mut out = vec![0.0; x.len()];
        let mut acc = vec![0.0; groups];
        for b in 0..n {
            let span = b * hw * c..(b + 1) * hw * c;
            let xs = &x[span.clone()];
            acc.fill(0.0);
            for row in xs.chunks_exact(c) {
                for (j, v) in row.iter().enumerate() {
                    acc[gi[j]] += v;
                }
            }
            let m = &mut mean[b * groups..(b + 1) * groups];
            m.iter_mut().zip(&acc).for_each(|(m, a)| *m = a / count);
            acc.fill(0.0);
            for row in xs.chunks_exact(c) {
                for (j, v) in row.iter().enumerate() {
                    let d = v - m[gi[j]];
                    acc[gi[j]] += d * d;
                }
            }
            let r = &mut rstd[b * groups..(b + 1) * groups];
            r.iter_mut().zip(&acc).for_each(|(r, a)| *r = 1.0 / (a / count + eps).sqrt());
            for (orow, row) in out[span].chunks_exact_mut(c).zip(xs.chunks_exact(c)) {
                for j in 0..c {
                    orow[j] = (row[j] - m[gi[j]]) * r[gi[j]] * gain[j] + bias[j];
                }
            }
        }
        (out, mean, rstd)
    }

    /// Accumulates into `gx` (skipped when empty), `ggain` and `gbias`.
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        g: &[f64],
        x: &[f64],
        gain: &[f64],
        mean: &[f64],
        rstd: &[f64],
        gx: &mut [f64],
        ggain: &mut [f64],
        gbias: &mut [f64],
    ) {
        let NormLayout { n, hw, c, groups } = *self;
        let gi = self.group_of();
        let count = self.count();
        let mut sum_d = vec![0.0; groups];
        let mut sum_dx = vec![0.0; groups];
        for b in 0..n {
            let span = b * hw * c..(b + 1) * hw * c;
            let (m, r) = (&mean[b * groups..(b + 1) * groups], &rstd[b * groups..(b + 1) * groups]);
            sum_d.fill(0.0);
            sum_dx.fill(0.0);
            for (grow, row) in g[span.clone()].chunks_exact(c).zip(x[span.clone()].chunks_exact(c)) {
                for j in 0..c {
                    let k = gi[j];
                    let xhat = (row[j] - m[k]) * r[k];
                    let d = grow[j] * gain[j];
                    ggain[j] += grow[j] * xhat;
                    gbias[j] += grow[j];
                    sum_d[k] += d;
                    sum_dx[k] += d * xhat;
                }
            }
            if gx.is_empty() {
                continue;
            }
            let rows = g[span.clone()].chunks_exact(c).zip(x[span.clone()].chunks_exact(c));
            for ((dst, grow), row) in gx[span].chunks_exact_mut(c).zip(rows.clone().map(|p| p.0)).zip(rows.map(|p| p.1)) {
                for j in 0..c {
                    let k = gi[j];
                    let xhat = (row[j] - m[k]) * r[k];
                    let d = grow[j] * gain[j];
                    dst[j] += r[k] * (d - sum_d[k] / count - xhat * sum_dx[k] / count);
                }
            }
        }
    }
}

/// Geometry of a recorded convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub c_out: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.c_in
    }

    fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let k = g.patch_len();
    let mut cols = vec![0.0; g.rows() * k];
    let mut row = 0;
    for b in 0..g.n {
        let img = &x[b * g.h * g.w * g.c_in..];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let dst = &mut cols[row * k..(row + 1) * k];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = (iy as usize * g.w + ix as usize) * g.c_in;
                        let d = (ky * g.kw + kx) * g.c_in;
                        dst[d..d + g.c_in].copy_from_slice(&img[src..src + g.c_in]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], g: &ConvGeom, gx: &mut [f64]) {
    let k = g.patch_len();
    let mut row = 0;
    for b in 0..g.n {
        let img = &mut gx[b * g.h * g.w * g.c_in..];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let src = &cols[row * k..(row + 1) * k];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = (iy as usize * g.w + ix as usize) * g.c_in;
                        let s = (ky * g.kw + kx) * g.c_in;
                        for (d, v) in img[dst..dst + g.c_in].iter_mut().zip(&src[s..s + g.c_in]) {
                            *d += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn conv_im2col(x: &[f64], w: &[f64], g: &ConvGeom, bias: Option<&[f64]>) -> Vec<f64> {
    let (rows, k) = (g.rows(), g.patch_len());
    let owned;
    let cols: &[f64] = if g.is_pointwise() {
        x
    } else {
        owned = im2col(x, g);
        &owned
    };
    let mut out = vec![0.0; rows * g.c_out];
    if let Some(bias) = bias {
        for row in out.chunks_exact_mut(g.c_out) {
            row.copy_from_slice(bias);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    gemm(MatRef::row_major(cols, rows, k), MatRef::row_major(w, k, g.c_out), &mut out, beta);
    out
}

/// Stride-1 convolution as one GEMM per kernel tap over a zero-padded copy
/// of the input. Output rows live on the padded grid: output `(b, y, x)` is
/// row `b·P + y·Wp + x`, so tap `(ky, kx)` reads the padded input shifted by
/// `ky·Wp + kx` rows. Rows between valid outputs are computed and dropped.
impl ConvGeom {
    fn uses_shifts(&self) -> bool {
        self.stride == 1 && !self.is_pointwise()
    }

    fn padded(&self) -> (usize, usize) {
        (self.h + 2 * self.pad, self.w + 2 * self.pad)
    }

    fn shift_rows(&self) -> usize {
        let (hp, wp) = self.padded();
        (self.n - 1) * hp * wp + (self.ho - 1) * wp + self.wo
    }

    fn taps(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let wp = self.padded().1;
        (0..self.kh * self.kw).map(move |t| (t, (t / self.kw) * wp + t % self.kw))
    }

    fn valid_rows(&self) -> impl Iterator<Item = usize> + '_ {
        let (hp, wp) = self.padded();
        (0..self.n).flat_map(move |b| {
            (0..self.ho).flat_map(move |y| (0..self.wo).map(move |x| b * hp * wp + y * wp + x))
        })
    }
}

fn pad_input(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (hp, wp) = g.padded();
    let c = g.c_in;
    let mut out = vec![0.0; g.n * hp * wp * c];
    for b in 0..g.n {
        for y in 0..g.h {
            let src = ((b * g.h + y) * g.w) * c;
            let dst = ((b * hp + y + g.pad) * wp + g.pad) * c;
            out[dst..dst + g.w * c].copy_from_slice(&x[src..src + g.w * c]);
        }
    }
    out
}

fn conv_shifted(x: &[f64], w: &[f64], g: &ConvGeom, bias: Option<&[f64]>) -> Vec<f64> {
    let xpad = pad_input(x, g);
    let (r, ci, co) = (g.shift_rows(), g.c_in, g.c_out);
    let mut ypad = vec![0.0; r * co];
    for (t, off) in g.taps() {
        gemm(
            MatRef::row_major(&xpad[off * ci..(off + r) * ci], r, ci),
            MatRef::row_major(&w[t * ci * co..(t + 1) * ci * co], ci, co),
            &mut ypad,
            1.0,
        );
    }
    let mut out = Vec::with_capacity(g.rows() * co);
    for row in g.valid_rows() {
        let src = &ypad[row * co..(row + 1) * co];
        match bias {
            Some(bias) => out.extend(src.iter().zip(bias).map(|(v, b)| v + b)),
            None => out.extend_from_slice(src),
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_shifted_backward(sink: &mut GradSink<'_>, x: Var, w: Var, xd: &[f64], wd: &[f64], g: &[f64], geom: &ConvGeom) {
    let (r, ci, co) = (geom.shift_rows(), geom.c_in, geom.c_out);
    let mut gpad = vec![0.0; r * co];
    for (i, row) in geom.valid_rows().enumerate() {
        gpad[row * co..(row + 1) * co].copy_from_slice(&g[i * co..(i + 1) * co]);
    }
    let gm = MatRef::row_major(&gpad, r, co);
    if sink.wants(w) {
        let xpad = pad_input(xd, geom);
        let gw = sink.buf(w);
        for (t, off) in geom.taps() {
            gemm(
                MatRef::row_major(&xpad[off * ci..(off + r) * ci], r, ci).t(),
                gm,
                &mut gw[t * ci * co..(t + 1) * ci * co],
                1.0,
            );
        }
    }
    if sink.wants(x) {
        let (hp, wp) = geom.padded();
        let mut dxpad = vec![0.0; geom.n * hp * wp * ci];
        for (t, off) in geom.taps() {
            gemm(
                gm,
                MatRef::row_major(&wd[t * ci * co..(t + 1) * ci * co], ci, co).t(),
                &mut dxpad[off * ci..(off + r) * ci],
                1.0,
            );
        }
        let gx = sink.buf(x);
        for b in 0..geom.n {
            for y in 0..geom.h {
                let dst = ((b * geom.h + y) * geom.w) * ci;
                let src = ((b * hp + y + geom.pad) * wp + geom.pad) * ci;
                for (d, v) in gx[dst..dst + geom.w * ci].iter_mut().zip(&dxpad[src..src + geom.w * ci]) {
                    *d += v;
                }
            }
        }
    }
}

fn suffix_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        Ok(())
    } else {
        Err(Error::shape(op, a, b))
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::shape(op, a, b))
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis < shape.len() {
        Ok(())
    } else {
        Err(Error::invalid(op, format!("axis {axis} out of range for {shape:?}")))
    }
}

fn nhwc(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [n, h, w, c] => Ok([n, h, w, c]),
        _ => Err(Error::invalid(op, format!("expected NHWC tensor, got {shape:?}"))),
    }
}

/// Batch layout of a matmul: `(batch, m, k, n, b_is_shared)`.
fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", a, b));
    }
    let batch_a = &a[..a.len() - 2];
    let batch_b = &b[..b.len() - 2];
    let shared = batch_b.is_empty();
    if !shared && batch_a != batch_b {
        return Err(Error::shape("matmul", a, b));
    }
    Ok((batch_a.iter().product(), m, k, n, shared))
}

impl Tape {
    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        suffix_broadcast(name, av.shape(), bv.shape())?;
        let nb = bv.numel();
        let bd = bv.data();
        let data = av.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % nb])).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(name, out, op)
    }

    /// Elementwise `a + b`; `b` may be a trailing-suffix broadcast of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.push("scale", out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        self.push("add_scalar", out, Op::Shift(a))
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Result<Var> {
        let out = self.value(a).map(|x| kind.apply(x));
        self.push(kind.name(), out, Op::Unary(a, kind))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Silu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Log)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Abs)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Square)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::LogSigmoid)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a))
    }

    /// Sum over `axis`, which is removed from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        check_axis("sum_axis", t.shape(), axis)?;
        let (outer, d, inner) = split_axis(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..d {
                let src = &t.data()[(o * d + j) * inner..(o * d + j + 1) * inner];
                for (dst, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += v;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        self.push("sum_axis", Tensor::from_parts(shape, out), Op::SumAxis(a, axis))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let d = self.shape(a).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / d as f64)
    }

    /// Mean absolute difference.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("l1", av.shape(), bv.shape())?;
        let s = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / av.numel() as f64;
        self.push("l1", Tensor::scalar(s), Op::L1(a, b))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mse", av.shape(), bv.shape())?;
        let s = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / av.numel() as f64;
        self.push("mse", Tensor::scalar(s), Op::Mse(a, b))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        self.push("reshape", t, Op::Reshape(a))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(a).permute(axes)?;
        self.push("permute", t, Op::Permute(a, axes.to_vec()))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push("concat", Tensor::from_parts(shape, out), Op::Concat(parts.to_vec(), axis))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        check_axis("narrow", t.shape(), axis)?;
        let (outer, d, inner) = split_axis(t.shape(), axis);
        if len == 0 || start + len > d {
            return Err(Error::invalid("narrow", format!("range {start}..{} exceeds extent {d}", start + len)));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&t.data()[(o * d + start) * inner..(o * d + start + len) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        self.push("narrow", Tensor::from_parts(shape, out), Op::Narrow { a, axis, start })
    }

    /// Splits `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.narrow(a, axis, start, len)?);
            start += len;
        }
        if Some(&start) != self.shape(a).get(axis) {
            return Err(Error::invalid("split", format!("sizes {sizes:?} do not cover axis {axis}")));
        }
        Ok(out)
    }

    /// Batched matrix product over the trailing two axes. `b` may be a plain
    /// matrix shared across all batches.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (batch, m, k, n, shared) = matmul_dims(av.shape(), bv.shape())?;
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let am = MatRef::row_major(&av.data()[i * m * k..(i + 1) * m * k], m, k);
            let boff = if shared { 0 } else { i * k * n };
            let bm = MatRef::row_major(&bv.data()[boff..boff + k * n], k, n);
            gemm(am, bm, &mut out[i * m * n..(i + 1) * m * n], 0.0);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push("matmul", Tensor::from_parts(shape, out), Op::MatMul(a, b))
    }

    /// 2-D convolution (cross-correlation) with zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let [n, h, wd, c_in] = nhwc("conv2d", xv.shape())?;
        let [kh, kw, wc_in, c_out] = match *wv.shape() {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(Error::invalid("conv2d", format!("weight must be (kh, kw, c_in, c_out), got {:?}", wv.shape()))),
        };
        if wc_in != c_in {
            return Err(Error::shape("conv2d", xv.shape(), wv.shape()));
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::invalid("conv2d", format!("kernel {kh}x{kw} does not fit input {h}x{wd} with pad {pad}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::shape("conv2d", &[c_out], self.shape(b)));
            }
        }
        let geom = ConvGeom {
            n,
            h,
            w: wd,
            c_in,
            kh,
            kw,
            c_out,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let bias = b.map(|b| self.value(b).data());
        let out = if geom.uses_shifts() {
            conv_shifted(xv.data(), wv.data(), &geom, bias)
        } else {
            conv_im2col(xv.data(), wv.data(), &geom, bias)
        };
        let t = Tensor::from_parts(vec![n, geom.ho, geom.wo, c_out], out);
        self.push("conv2d", t, Op::Conv2d { x, w, b, geom })
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        check_axis("softmax", t.shape(), axis)?;
        let (outer, d, inner) = split_axis(t.shape(), axis);
        let x = t.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * d + j) * inner + i;
                let max = (0..d).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..d {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..d {
                    out[at(j)] /= total;
                }
            }
        }
        self.push("softmax", Tensor::from_parts(t.shape().to_vec(), out), Op::Softmax(a, axis))
    }

    /// Normalises each vector along the last axis, then applies `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm", "eps must be positive"));
        }
        let xv = self.value(x);
        let c = *xv.shape().last().ok_or_else(|| Error::invalid("layer_norm", "scalar input"))?;
        same_shape("layer_norm", &[c], self.shape(gain))?;
        same_shape("layer_norm", &[c], self.shape(bias))?;
        let layout = NormLayout { n: xv.numel() / c, hw: 1, c, groups: 1 };
        let (out, mean, rstd) = layout.forward(xv.data(), self.value(gain).data(), self.value(bias).data(), eps);
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push("layer_norm", t, Op::Norm { x, gain, bias, layout, mean, rstd })
    }

    /// Group normalisation over NHWC input: statistics per sample and
    /// channel group, across all spatial positions.
    pub fn group_norm(&mut self, x: Var, gain: Var, bias: Var, groups: usize, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::invalid("group_norm", "eps must be positive"));
        }
        let xv = self.value(x);
        let [n, h, w, c] = nhwc("group_norm", xv.shape())?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::invalid("group_norm", format!("{c} channels not divisible into {groups} groups")));
        }
        same_shape("group_norm", &[c], self.shape(gain))?;
        same_shape("group_norm", &[c], self.shape(bias))?;
        let layout = NormLayout { n, hw: h * w, c, groups };
        let (out, mean, rstd) = layout.forward(xv.data(), self.value(gain).data(), self.value(bias).data(), eps);
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push("group_norm", t, Op::Norm { x, gain, bias, layout, mean, rstd })
    }

    /// 2×2 average pooling, stride 2.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let [n, h, w, c] = nhwc("avg_pool2", t.shape())?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid("avg_pool2", format!("odd spatial size {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let x = t.data();
        let mut out = vec![0.0; n * ho * wo * c];
        for b in 0..n {
            for y in 0..ho {
                for xo in 0..wo {
                    let dst = ((b * ho + y) * wo + xo) * c;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let src = ((b * h + 2 * y + dy) * w + 2 * xo + dx) * c;
                        for ch in 0..c {
                            out[dst + ch] += 0.25 * x[src + ch];
                        }
                    }
                }
            }
        }
        self.push("avg_pool2", Tensor::from_parts(vec![n, ho, wo, c], out), Op::AvgPool2(a))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let [n, h, w, c] = nhwc("upsample2", t.shape())?;
        let x = t.data();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = Vec::with_capacity(n * ho * wo * c);
        for b in 0..n {
            for y in 0..ho {
                for xo in 0..wo {
                    let src = ((b * h + y / 2) * w + xo / 2) * c;
                    out.extend_from_slice(&x[src..src + c]);
                }
            }
        }
        self.push("upsample2", Tensor::from_parts(vec![n, ho, wo, c], out), Op::Upsample2(a))
    }

    /// Rows of a `(M, C)` table selected by index; gradients scatter back.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let [m, c] = match *t.shape() {
            [m, c] => [m, c],
            _ => return Err(Error::invalid("gather_rows", format!("table must be 2-D, got {:?}", t.shape()))),
        };
        if rows.is_empty() {
            return Err(Error::invalid("gather_rows", "no rows requested"));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= m {
                return Err(Error::invalid("gather_rows", format!("row {r} out of range for {m}")));
            }
            out.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
        }
        let t = Tensor::from_parts(vec![rows.len(), c], out);
        self.push("gather_rows", t, Op::Gather { table, rows: rows.to_vec() })
    }

    /// Forward value of `target`; backward routes the incoming gradient to
    /// `source` unchanged and nothing to `target`.
    pub fn straight_through(&mut self, source: Var, target: Var) -> Result<Var> {
        same_shape("straight_through", self.shape(source), self.shape(target))?;
        let t = self.value(target).clone();
        self.push("straight_through", t, Op::StraightThrough(source))
    }

    /// Scales every vector along the last axis to unit L2 norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let c = *t.shape().last().ok_or_else(|| Error::invalid("l2_normalize", "scalar input"))?;
        let mut norms = Vec::with_capacity(t.numel() / c);
        let mut out = t.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::invalid("l2_normalize", "zero vector"));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let t = Tensor::from_parts(t.shape().to_vec(), out);
        self.push("l2_normalize", t, Op::L2Normalize(a, norms))
    }

    /// Bilinear crop-and-resize of an NHWC tensor (fixed-box ROI sampling).
    pub fn crop_resize(&mut self, a: Var, bx: CropBox, out_h: usize, out_w: usize) -> Result<Var> {
        let t = self.value(a);
        let plan = ResamplePlan::new(t.shape(), bx, out_h, out_w)?;
        let out = Tensor::from_parts(plan.out_shape(), plan.forward(t.data()));
        self.push("crop_resize", out, Op::Resample(a, Box::new(plan)))
    }
}

pub(crate) fn backward(node: &Node, _index: usize, g: &[f64], sink: &mut GradSink<'_>) {
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            sink.with(*a, |ga| ga.iter_mut().zip(g).for_each(|(d, v)| *d += v));
            sink.with(*b, |gb| {
                let nb = gb.len();
                for (i, v) in g.iter().enumerate() {
                    gb[i % nb] += sign * v;
                }
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (sink.value(*a).data(), sink.value(*b).data());
            let nb = bv.len();
            sink.with(*a, |ga| {
                for (i, d) in ga.iter_mut().enumerate() {
                    *d += g[i] * bv[i % nb];
                }
            });
            sink.with(*b, |gb| {
                for (i, v) in g.iter().enumerate() {
                    gb[i % nb] += v * av[i];
                }
            });
        }
        Op::Scale(a, s) => sink.with(*a, |ga| ga.iter_mut().zip(g).for_each(|(d, v)| *d += s * v)),
        Op::Shift(a) | Op::Reshape(a) => sink.with(*a, |ga| ga.iter_mut().zip(g).for_each(|(d, v)| *d += v)),
        Op::StraightThrough(a) => sink.with(*a, |ga| ga.iter_mut().zip(g).for_each(|(d, v)| *d += v)),
        Op::Unary(a, kind) => {
            let x = sink.value(*a).data();
            let y = node.value.data();
            sink.with(*a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * kind.deriv(x[i], y[i]);
                }
            });
        }
        Op::Sum(a) => sink.with(*a, |ga| ga.iter_mut().for_each(|d| *d += g[0])),
        Op::Mean(a) => sink.with(*a, |ga| {
            let s = g[0] / ga.len() as f64;
            ga.iter_mut().for_each(|d| *d += s)
        }),
        Op::SumAxis(a, axis) => {
            let (outer, d, inner) = split_axis(sink.value(*a).shape(), *axis);
            sink.with(*a, |ga| {
                for o in 0..outer {
                    for j in 0..d {
                        let dst = &mut ga[(o * d + j) * inner..(o * d + j + 1) * inner];
                        for (x, v) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *x += v;
                        }
                    }
                }
            });
        }
        Op::L1(a, b) | Op::Mse(a, b) => {
            let (av, bv) = (sink.value(*a).data(), sink.value(*b).data());
            let n = av.len() as f64;
            let is_l1 = matches!(node.op, Op::L1(..));
            let d: Vec<f64> = av
                .iter()
                .zip(bv)
                .map(|(x, y)| {
                    let diff = x - y;
                    let local = if is_l1 {
                        if diff > 0.0 {
                            1.0
                        } else if diff < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    } else {
                        2.0 * diff
                    };
                    local * g[0] / n
                })
                .collect();
            sink.with(*a, |ga| ga.iter_mut().zip(&d).for_each(|(x, v)| *x += v));
            sink.with(*b, |gb| gb.iter_mut().zip(&d).for_each(|(x, v)| *x -= v));
        }
        Op::Permute(a, axes) => {
            let mut inverse = vec![0; axes.len()];
            for (i, &ax) in axes.iter().enumerate() {
                inverse[ax] = i;
            }
            let gt = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec())
                .permute(&inverse)
                .expect("inverse permutation is valid");
            sink.with(*a, |ga| ga.iter_mut().zip(gt.data()).for_each(|(d, v)| *d += v));
        }
        Op::Concat(parts, axis) => {
            let (outer, total, inner) = split_axis(node.value.shape(), *axis);
            let mut offset = 0;
            for &p in parts {
                let d = sink.value(p).shape()[*axis];
                sink.with(p, |gp| {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + d) * inner];
                        for (x, v) in gp[o * d * inner..(o + 1) * d * inner].iter_mut().zip(src) {
                            *x += v;
                        }
                    }
                });
                offset += d;
            }
        }
        Op::Narrow { a, axis, start } => {
            let (outer, d, inner) = split_axis(sink.value(*a).shape(), *axis);
            let len = node.value.shape()[*axis];
            sink.with(*a, |ga| {
                for o in 0..outer {
                    let dst = &mut ga[(o * d + start) * inner..(o * d + start + len) * inner];
                    for (x, v) in dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                        *x += v;
                    }
                }
            });
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (sink.value(*a), sink.value(*b));
            let (batch, m, k, n, shared) = matmul_dims(av.shape(), bv.shape()).expect("checked in forward");
            let (ad, bd) = (av.data(), bv.data());
            sink.with(*a, |ga| {
                for i in 0..batch {
                    let boff = if shared { 0 } else { i * k * n };
                    gemm(
                        MatRef::row_major(&g[i * m * n..(i + 1) * m * n], m, n),
                        MatRef::row_major(&bd[boff..boff + k * n], k, n).t(),
                        &mut ga[i * m * k..(i + 1) * m * k],
                        1.0,
                    );
                }
            });
            sink.with(*b, |gb| {
                if shared {
                    // Stack batches along rows: gb += Aᵀ·G over (batch·m) rows.
                    gemm(
                        MatRef::row_major(ad, batch * m, k).t(),
                        MatRef::row_major(g, batch * m, n),
                        gb,
                        1.0,
                    );
                } else {
                    for i in 0..batch {
                        gemm(
                            MatRef::row_major(&ad[i * m * k..(i + 1) * m * k], m, k).t(),
                            MatRef::row_major(&g[i * m * n..(i + 1) * m * n], m, n),
                            &mut gb[i * k * n..(i + 1) * k * n],
                            1.0,
                        );
                    }
                }
            });
        }
        Op::Conv2d { x, w, b, geom } => {
            let rows = geom.rows();
            let k = geom.patch_len();
            let gm = MatRef::row_major(g, rows, geom.c_out);
            if let Some(b) = b {
                sink.with(*b, |gb| {
                    for row in g.chunks_exact(geom.c_out) {
                        gb.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                });
            }
            let xd = sink.value(*x).data();
            let wd = sink.value(*w).data();
            if geom.uses_shifts() {
                conv_shifted_backward(sink, *x, *w, xd, wd, g, geom);
                return;
            }
            if sink.wants(*w) {
                let owned;
                let cols: &[f64] = if geom.is_pointwise() {
                    xd
                } else {
                    owned = im2col(xd, geom);
                    &owned
                };
                gemm(MatRef::row_major(cols, rows, k).t(), gm, sink.buf(*w), 1.0);
            }
            if sink.wants(*x) {
                let wm = MatRef::row_major(wd, k, geom.c_out).t();
                if geom.is_pointwise() {
                    gemm(gm, wm, sink.buf(*x), 1.0);
                } else {
                    let mut gcols = vec![0.0; rows * k];
                    gemm(gm, wm, &mut gcols, 0.0);
                    col2im_add(&gcols, geom, sink.buf(*x));
                }
            }
        }
        Op::Softmax(a, axis) => {
            let y = node.value.data();
            let (outer, d, inner) = split_axis(node.value.shape(), *axis);
            sink.with(*a, |ga| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * d + j) * inner + i;
                        let dot: f64 = (0..d).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..d {
                            ga[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            });
        }
        Op::Norm { x, gain, bias, layout, mean, rstd } => {
            let xd = sink.value(*x).data();
            let gd = sink.value(*gain).data();
            let (mut ggain, mut gbias) = (vec![0.0; layout.c], vec![0.0; layout.c]);
            let want_x = sink.wants(*x);
            let mut gx = vec![0.0; if want_x { xd.len() } else { 0 }];
            layout.backward(g, xd, gd, mean, rstd, &mut gx, &mut ggain, &mut gbias);
            sink.with(*gain, |d| d.iter_mut().zip(&ggain).for_each(|(d, v)| *d += v));
            sink.with(*bias, |d| d.iter_mut().zip(&gbias).for_each(|(d, v)| *d += v));
            sink.with(*x, |d| d.iter_mut().zip(&gx).for_each(|(d, v)| *d += v));
        }
        Op::AvgPool2(a) => {
            let [n, h, w, c] = nhwc("avg_pool2", sink.value(*a).shape()).expect("checked");
            let (ho, wo) = (h / 2, w / 2);
            sink.with(*a, |ga| {
                for b in 0..n {
                    for y in 0..ho {
                        for xo in 0..wo {
                            let src = ((b * ho + y) * wo + xo) * c;
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let dst = ((b * h + 2 * y + dy) * w + 2 * xo + dx) * c;
                                for ch in 0..c {
                                    ga[dst + ch] += 0.25 * g[src + ch];
                                }
                            }
                        }
                    }
                }
            });
        }
        Op::Upsample2(a) => {
            let [n, h, w, c] = nhwc("upsample2", sink.value(*a).shape()).expect("checked");
            let (ho, wo) = (2 * h, 2 * w);
            sink.with(*a, |ga| {
                for b in 0..n {
                    for y in 0..ho {
                        for xo in 0..wo {
                            let dst = ((b * h + y / 2) * w + xo / 2) * c;
                            let src = ((b * ho + y) * wo + xo) * c;
                            for ch in 0..c {
                                ga[dst + ch] += g[src + ch];
                            }
                        }
                    }
                }
            });
        }
        Op::Gather { table, rows } => {
            let c = sink.value(*table).shape()[1];
            sink.with(*table, |gt| {
                for (i, &r) in rows.iter().enumerate() {
                    for (d, v) in gt[r * c..(r + 1) * c].iter_mut().zip(&g[i * c..(i + 1) * c]) {
                        *d += v;
                    }
                }
            });
        }
        Op::L2Normalize(a, norms) => {
            let y = node.value.data();
            let c = y.len() / norms.len();
            sink.with(*a, |ga| {
                for (r, norm) in norms.iter().enumerate() {
                    let span = r * c..(r + 1) * c;
                    let dot: f64 = g[span.clone()].iter().zip(&y[span.clone()]).map(|(a, b)| a * b).sum();
                    for i in span {
                        ga[i] += (g[i] - y[i] * dot) / norm;
                    }
                }
            });
        }
        Op::Resample(a, plan) => sink.with(*a, |ga| plan.backward(g, ga)),
    }
}

/// Shape of an NHWC convolution output, for callers sizing buffers.
pub fn conv_output_size(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}
