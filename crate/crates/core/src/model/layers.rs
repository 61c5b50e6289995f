//! Parameterized building blocks shared by all networks.

use defectda_tensor::{checksum, init, Buffer, Conv2dOpts, Elem, Param, Var};
use ndarray::ArrayD;
use rand::Rng;

/// Anything that owns parameters (and optionally non-trainable buffers).
pub trait Module<T: Elem> {
    fn params(&self) -> Vec<Param<T>>;

    fn buffers(&self) -> Vec<Buffer<T>> {
        Vec::new()
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(Param::numel).sum()
    }

    fn set_trainable(&self, on: bool) {
        for p in self.params() {
            p.set_trainable(on);
        }
    }

    /// SHA-256 over every parameter and buffer, in declaration order.
    fn checksum(&self) -> String {
        let params = self.params();
        let buffers = self.buffers();
        checksum(params.iter().map(|p| p.value()).chain(buffers.iter().map(|b| b.value())))
    }
}

pub struct Conv2d<T: Elem> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub opts: Conv2dOpts,
}

impl<T: Elem> Conv2d<T> {
    pub fn new<R: Rng>(name: &str, cin: usize, cout: usize, k: usize, opts: Conv2dOpts, bias: bool, rng: &mut R) -> Self {
        let fan_in = cin * k * k;
        Conv2d {
            weight: Param::new(format!("{name}.weight"), init::kaiming_uniform(&[cout, cin, k, k], fan_in, rng)),
            bias: bias.then(|| Param::new(format!("{name}.bias"), init::zeros(&[cout]))),
            opts,
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        let b = self.bias.as_ref().map(Param::var);
        x.conv2d(&self.weight.var(), b.as_ref(), self.opts)
    }
}

impl<T: Elem> Module<T> for Conv2d<T> {
    fn params(&self) -> Vec<Param<T>> {
        std::iter::once(self.weight.clone()).chain(self.bias.clone()).collect()
    }
}

pub struct DepthwiseConv2d<T: Elem> {
    pub weight: Param<T>,
    pub opts: Conv2dOpts,
}

impl<T: Elem> DepthwiseConv2d<T> {
    pub fn new<R: Rng>(name: &str, channels: usize, k: usize, opts: Conv2dOpts, rng: &mut R) -> Self {
        DepthwiseConv2d {
            weight: Param::new(format!("{name}.weight"), init::kaiming_uniform(&[channels, 1, k, k], k * k, rng)),
            opts,
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        x.depthwise_conv2d(&self.weight.var(), self.opts)
    }
}

impl<T: Elem> Module<T> for DepthwiseConv2d<T> {
    fn params(&self) -> Vec<Param<T>> {
        vec![self.weight.clone()]
    }
}

/// Batch normalization over `(N, H, W)` per channel with running statistics.
///
/// Running statistics are buffers, not parameters: they keep updating in
/// training mode even when the affine parameters are frozen.
pub struct BatchNorm2d<T: Elem> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Buffer<T>,
    pub running_var: Buffer<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Elem> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(format!("{name}.gamma"), init::ones(&[channels])),
            beta: Param::new(format!("{name}.beta"), init::zeros(&[channels])),
            running_mean: Buffer::new(init::zeros(&[channels])),
            running_var: Buffer::new(init::ones(&[channels])),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Var<T>, train: bool) -> Var<T> {
        let (gamma, beta) = (self.gamma.var(), self.beta.var());
        if train {
            let (xhat, stats) = x.normalize_channels(T::of(self.eps));
            let s = x.shape();
            let n: usize = s[0] * s[2..].iter().product::<usize>();
            let unbias = T::of(n as f64 / (n.max(2) - 1) as f64);
            let m = T::of(self.momentum);
            self.running_mean.update(|rm| {
                rm.zip_mut_with(&stats.mean.clone().into_dyn(), |r, &v| *r = (T::one() - m) * *r + m * v)
            });
            self.running_var.update(|rv| {
                rv.zip_mut_with(&stats.var.clone().into_dyn(), |r, &v| *r = (T::one() - m) * *r + m * v * unbias)
            });
            xhat.channel_affine(&gamma, &beta)
        } else {
            let mean = self.running_mean.value().clone();
            let inv_std = self.running_var.value().mapv(|v| T::one() / (v + T::of(self.eps)).sqrt());
            let scale = gamma.mul(&Var::constant(inv_std));
            let shift = beta.sub(&scale.mul(&Var::constant(mean)));
            x.channel_affine(&scale, &shift)
        }
    }
}

impl<T: Elem> Module<T> for BatchNorm2d<T> {
    fn params(&self) -> Vec<Param<T>> {
        vec![self.gamma.clone(), self.beta.clone()]
    }

    fn buffers(&self) -> Vec<Buffer<T>> {
        vec![self.running_mean.clone(), self.running_var.clone()]
    }
}

/// Parameter-free instance normalization of an NCHW tensor.
pub fn instance_norm<T: Elem>(x: &Var<T>) -> Var<T> {
    let s = x.shape().to_vec();
    let flat = x.reshape(&[1, s[0] * s[1], s[2], s[3]]);
    flat.normalize_channels(T::of(1e-5)).0.reshape(&s)
}

pub struct Dense<T: Elem> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Elem> Dense<T> {
    pub fn new<R: Rng>(name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Dense {
            weight: Param::new(format!("{name}.weight"), init::xavier_uniform(&[fan_in, fan_out], fan_in, fan_out, rng)),
            bias: Param::new(format!("{name}.bias"), init::zeros(&[fan_out])),
        }
    }

    /// Weights drawn from `U[-bound, bound]`, zero bias.
    pub fn with_bound<R: Rng>(name: &str, fan_in: usize, fan_out: usize, bound: f64, rng: &mut R) -> Self {
        Dense {
            weight: Param::new(format!("{name}.weight"), init::uniform(&[fan_in, fan_out], bound, rng)),
            bias: Param::new(format!("{name}.bias"), init::zeros(&[fan_out])),
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        x.matmul(&self.weight.var()).add(&self.bias.var())
    }
}

impl<T: Elem> Module<T> for Dense<T> {
    fn params(&self) -> Vec<Param<T>> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

pub(crate) fn collect<T: Elem>(mods: &[&dyn Module<T>]) -> Vec<Param<T>> {
    mods.iter().flat_map(|m| m.params()).collect()
}

pub(crate) fn collect_buffers<T: Elem>(mods: &[&dyn Module<T>]) -> Vec<Buffer<T>> {
    mods.iter().flat_map(|m| m.buffers()).collect()
}

/// Copies all parameter and buffer values from `src` into `dst`.
pub fn copy_state<T: Elem>(src: &dyn Module<T>, dst: &dyn Module<T>) {
    for (a, b) in src.params().iter().zip(dst.params()) {
        b.set_value(a.value().clone());
    }
    for (a, b) in src.buffers().iter().zip(dst.buffers()) {
        b.set_value(a.value().clone());
    }
}

/// Owned snapshot of a module's state, used for early-stopping restores.
#[derive(Clone, Debug)]
pub struct Snapshot<T: Elem> {
    params: Vec<ArrayD<T>>,
    buffers: Vec<ArrayD<T>>,
}

impl<T: Elem> Snapshot<T> {
    pub fn take(m: &dyn Module<T>) -> Self {
        Snapshot {
            params: m.params().iter().map(|p| p.value().clone()).collect(),
            buffers: m.buffers().iter().map(|b| b.value().clone()).collect(),
        }
    }

    pub fn restore(&self, m: &dyn Module<T>) {
        for (p, v) in m.params().iter().zip(&self.params) {
            p.set_value(v.clone());
        }
        for (b, v) in m.buffers().iter().zip(&self.buffers) {
            b.set_value(v.clone());
        }
    }
}
