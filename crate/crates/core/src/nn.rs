//! Parameterised layers shared by the generators, discriminators and the
//! fixed feature networks. Each layer owns only its parameter names; the
//! values live in a [`ParamStore`].

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{ParamStore, Params, Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-6;

/// Largest group count not above `max_groups` that divides `channels`.
pub fn group_count(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// "Same" padding for odd kernels.
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            c_in,
            c_out,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.init_scaled(store, rng, 1.0);
    }

    /// Normal init with std `gain / sqrt(fan_in)`, zero bias.
    pub fn init_scaled(&self, store: &mut ParamStore, rng: &mut Rng, gain: f64) {
        let fan_in = (self.kernel * self.kernel * self.c_in) as f64;
        let shape = [self.kernel, self.kernel, self.c_in, self.c_out];
        store.insert(self.weight_name(), Tensor::randn(shape, gain / fan_in.sqrt(), rng));
        store.insert(self.bias_name(), Tensor::zeros([self.c_out]));
    }

    pub fn forward(&self, tape: &mut Tape, p: Params<'_>, x: Var) -> Result<Var> {
        let w = p.var(tape, &self.weight_name())?;
        let b = p.var(tape, &self.bias_name())?;
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub name: String,
    pub channels: usize,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(name: impl Into<String>, channels: usize, max_groups: usize) -> Self {
        Self {
            name: name.into(),
            channels,
            groups: group_count(channels, max_groups),
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert(format!("{}.gain", self.name), Tensor::ones([self.channels]));
        store.insert(format!("{}.bias", self.name), Tensor::zeros([self.channels]));
    }

    pub fn forward(&self, tape: &mut Tape, p: Params<'_>, x: Var) -> Result<Var> {
        let g = p.var(tape, &format!("{}.gain", self.name))?;
        let b = p.var(tape, &format!("{}.bias", self.name))?;
        tape.group_norm(x, g, b, self.groups, NORM_EPS)
    }
}

/// `x + conv(silu(gn(conv(silu(gn(x))))))`, with a 1×1 projection on the
/// skip path when the channel count changes.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv2d,
    pub norm2: GroupNorm,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(name: &str, c_in: usize, c_out: usize, max_groups: usize) -> Self {
        Self {
            norm1: GroupNorm::new(format!("{name}.norm1"), c_in, max_groups),
            conv1: Conv2d::new(format!("{name}.conv1"), c_in, c_out, 3, 1),
            norm2: GroupNorm::new(format!("{name}.norm2"), c_out, max_groups),
            conv2: Conv2d::new(format!("{name}.conv2"), c_out, c_out, 3, 1),
            skip: (c_in != c_out).then(|| Conv2d::new(format!("{name}.skip"), c_in, c_out, 1, 1)),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.norm1.init(store);
        self.conv1.init(store, rng);
        self.norm2.init(store);
        // Small residual branch at init keeps deep stacks close to identity.
        self.conv2.init_scaled(store, rng, 0.5);
        if let Some(s) = &self.skip {
            s.init(store, rng);
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: Params<'_>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, p, x)?;
        let h = tape.silu(h)?;
        let h = self.conv1.forward(tape, p, h)?;
        let h = self.norm2.forward(tape, p, h)?;
        let h = tape.silu(h)?;
        let h = self.conv2.forward(tape, p, h)?;
        let skip = match &self.skip {
            Some(s) => s.forward(tape, p, x)?,
            None => x,
        };
        tape.add(skip, h)
    }
}

/// Affine map over the last axis: `x · W + b` with `W: (c_in, c_out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize) -> Self {
        Self {
            name: name.into(),
            c_in,
            c_out,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        let std = 1.0 / (self.c_in as f64).sqrt();
        store.insert(format!("{}.weight", self.name), Tensor::randn([self.c_in, self.c_out], std, rng));
        store.insert(format!("{}.bias", self.name), Tensor::zeros([self.c_out]));
    }

    pub fn forward(&self, tape: &mut Tape, p: Params<'_>, x: Var) -> Result<Var> {
        let w = p.var(tape, &format!("{}.weight", self.name))?;
        let b = p.var(tape, &format!("{}.bias", self.name))?;
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}
