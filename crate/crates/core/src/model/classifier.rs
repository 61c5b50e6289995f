use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use defectda_tensor::{Buffer, Conv2dOpts, Elem, Param, Var};
use ndarray::{Array2, ArrayD, Axis, Ix2};
use rand::Rng;

use super::layers::{collect, collect_buffers, BatchNorm2d, Conv2d, Dense, DepthwiseConv2d, Module};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arch {
    SmallCnn,
    MobileNetLike,
    ResNet50Like,
    ResNet101Like,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::SmallCnn, Arch::MobileNetLike, Arch::ResNet50Like, Arch::ResNet101Like];

    pub fn name(self) -> &'static str {
        match self {
            Arch::SmallCnn => "small-cnn",
            Arch::MobileNetLike => "mobilenet-like",
            Arch::ResNet50Like => "resnet50-like",
            Arch::ResNet101Like => "resnet101-like",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::UnknownArch(s.to_string()))
    }
}

/// One backbone stage.
pub enum Block<T: Elem> {
    /// conv3x3 -> BN -> ReLU -> optional 2x2 max-pool
    Conv { conv: Conv2d<T>, bn: BatchNorm2d<T>, pool: bool },
    /// depthwise 3x3 -> BN -> ReLU -> pointwise 1x1 -> BN -> ReLU
    Separable { dw: DepthwiseConv2d<T>, bn1: BatchNorm2d<T>, pw: Conv2d<T>, bn2: BatchNorm2d<T> },
    /// two conv3x3 with an identity or projected shortcut
    Residual {
        c1: Conv2d<T>,
        bn1: BatchNorm2d<T>,
        c2: Conv2d<T>,
        bn2: BatchNorm2d<T>,
        proj: Option<(Conv2d<T>, BatchNorm2d<T>)>,
    },
}

impl<T: Elem> Block<T> {
    fn conv<R: Rng>(name: &str, cin: usize, cout: usize, pool: bool, rng: &mut R) -> Self {
        Block::Conv {
            conv: Conv2d::new(name, cin, cout, 3, Conv2dOpts::same(3, 1), false, rng),
            bn: BatchNorm2d::new(&format!("{name}.bn"), cout),
            pool,
        }
    }

    fn separable<R: Rng>(name: &str, cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        Block::Separable {
            dw: DepthwiseConv2d::new(&format!("{name}.dw"), cin, 3, Conv2dOpts::new(stride, 1, 1), rng),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), cin),
            pw: Conv2d::new(&format!("{name}.pw"), cin, cout, 1, Conv2dOpts::new(1, 0, 1), false, rng),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), cout),
        }
    }

    fn residual<R: Rng>(name: &str, cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        let proj = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(&format!("{name}.proj"), cin, cout, 1, Conv2dOpts::new(stride, 0, 1), false, rng),
                BatchNorm2d::new(&format!("{name}.proj_bn"), cout),
            )
        });
        Block::Residual {
            c1: Conv2d::new(&format!("{name}.c1"), cin, cout, 3, Conv2dOpts::new(stride, 1, 1), false, rng),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), cout),
            c2: Conv2d::new(&format!("{name}.c2"), cout, cout, 3, Conv2dOpts::same(3, 1), false, rng),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), cout),
            proj,
        }
    }

    pub fn forward(&self, x: &Var<T>, train: bool) -> Var<T> {
        match self {
            Block::Conv { conv, bn, pool } => {
                let h = bn.forward(&conv.forward(x), train).relu();
                if *pool {
                    h.max_pool2d(2)
                } else {
                    h
                }
            }
            Block::Separable { dw, bn1, pw, bn2 } => {
                let h = bn1.forward(&dw.forward(x), train).relu();
                bn2.forward(&pw.forward(&h), train).relu()
            }
            Block::Residual { c1, bn1, c2, bn2, proj } => {
                let h = bn1.forward(&c1.forward(x), train).relu();
                let h = bn2.forward(&c2.forward(&h), train);
                let short = match proj {
                    Some((c, bn)) => bn.forward(&c.forward(x), train),
                    None => x.clone(),
                };
                h.add(&short).relu()
            }
        }
    }
}

impl<T: Elem> Module<T> for Block<T> {
    fn params(&self) -> Vec<Param<T>> {
        match self {
            Block::Conv { conv, bn, .. } => collect(&[conv, bn]),
            Block::Separable { dw, bn1, pw, bn2 } => collect(&[dw, bn1, pw, bn2]),
            Block::Residual { c1, bn1, c2, bn2, proj } => {
                let mut v = collect(&[c1, bn1, c2, bn2]);
                if let Some((c, bn)) = proj {
                    v.extend(collect(&[c, bn]));
                }
                v
            }
        }
    }

    fn buffers(&self) -> Vec<Buffer<T>> {
        match self {
            Block::Conv { conv, bn, .. } => collect_buffers(&[conv, bn]),
            Block::Separable { dw, bn1, pw, bn2 } => collect_buffers(&[dw, bn1, pw, bn2]),
            Block::Residual { c1, bn1, c2, bn2, proj } => {
                let mut v = collect_buffers(&[c1, bn1, c2, bn2]);
                if let Some((c, bn)) = proj {
                    v.extend(collect_buffers(&[c, bn]));
                }
                v
            }
        }
    }
}

/// `f = g ∘ h`: a 1->3 channel input adapter, a backbone producing logits,
/// and a softmax head.
pub struct Classifier<T: Elem = f32> {
    pub arch: Arch,
    pub input_side: usize,
    pub num_classes: usize,
    pub adapter: Conv2d<T>,
    pub blocks: Vec<Block<T>>,
    pub head: Dense<T>,
    frozen: Cell<bool>,
}

/// Small head init keeps the untrained classifier close to uniform; the
/// pooled ReLU features are all positive, so a Glorot head is biased.
pub const HEAD_INIT_BOUND: f64 = 0.01;

/// Number of 3-channel outputs of the input adapter.
pub const ADAPTER_FILTERS: usize = 3;

impl<T: Elem> Classifier<T> {
    pub fn build<R: Rng>(arch: Arch, input_side: usize, num_classes: usize, rng: &mut R) -> Result<Self> {
        if input_side < 16 {
            return Err(Error::InvalidArgument(format!("input side {input_side} too small")));
        }
        let adapter = Conv2d::new("adapter", 1, ADAPTER_FILTERS, 3, Conv2dOpts::same(3, 1), true, rng);
        let c = ADAPTER_FILTERS;
        let (blocks, feat): (Vec<Block<T>>, usize) = match arch {
            Arch::SmallCnn => {
                let w = [8, 16, 32, 64];
                let mut cin = c;
                let mut blocks = Vec::new();
                for (i, &cout) in w.iter().enumerate() {
                    blocks.push(Block::conv(&format!("b{i}"), cin, cout, true, rng));
                    cin = cout;
                }
                (blocks, cin)
            }
            Arch::MobileNetLike => {
                let mut blocks = vec![Block::conv("stem", c, 16, true, rng)];
                let plan = [(16, 32, 1), (32, 64, 2), (64, 64, 1), (64, 128, 2), (128, 128, 1)];
                for (i, &(cin, cout, s)) in plan.iter().enumerate() {
                    blocks.push(Block::separable(&format!("ds{i}"), cin, cout, s, rng));
                }
                (blocks, 128)
            }
            Arch::ResNet50Like | Arch::ResNet101Like => {
                let depth: [usize; 3] = if arch == Arch::ResNet50Like { [2, 2, 2] } else { [3, 4, 3] };
                let mut blocks = vec![Block::conv("stem", c, 16, true, rng)];
                let mut cin = 16;
                for (stage, (&n, &cout)) in depth.iter().zip(&[16usize, 32, 64]).enumerate() {
                    for j in 0..n {
                        let stride = if j == 0 && stage > 0 { 2 } else { 1 };
                        blocks.push(Block::residual(&format!("s{stage}.{j}"), cin, cout, stride, rng));
                        cin = cout;
                    }
                }
                (blocks, cin)
            }
        };
        let head = Dense::with_bound("head", feat, num_classes, HEAD_INIT_BOUND, rng);
        Ok(Classifier { arch, input_side, num_classes, adapter, blocks, head, frozen: Cell::new(false) })
    }

    /// Logits `Z = h(x)` for an `(N, 1, side, side)` batch.
    pub fn logits(&self, x: &Var<T>, train: bool) -> Var<T> {
        assert_eq!(x.ndim(), 4, "classifier expects NCHW input");
        let mut h = self.adapter.forward(x);
        for b in &self.blocks {
            h = b.forward(&h, train);
        }
        self.head.forward(&h.mean_axes(&[2, 3], false))
    }

    /// `g(h(x))`, the class distribution per sample.
    pub fn probs(&self, x: &Var<T>, train: bool) -> Var<T> {
        self.logits(x, train).softmax()
    }

    /// Evaluation-mode probabilities, computed in chunks of `chunk` images.
    pub fn predict(&self, images: &ArrayD<T>, chunk: usize) -> Array2<T> {
        let n = images.shape()[0];
        let mut out = Array2::zeros((n, self.num_classes));
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let x = Var::constant(images.slice_axis(Axis(0), (start..end).into()).to_owned());
            let p = self.probs(&x, false);
            let p2 = p.value().view().into_dimensionality::<Ix2>().expect("probs are rank 2");
            out.slice_mut(ndarray::s![start..end, ..]).assign(&p2);
            start = end;
        }
        out
    }

    pub fn backbone_params(&self) -> Vec<Param<T>> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }

    /// Phase 1 of fine-tuning: adapter and head train, backbone frozen.
    pub fn prepare_phase1(&self) {
        self.set_frozen(false);
        for b in &self.blocks {
            b.set_trainable(false);
        }
    }

    /// Phase 2: additionally unfreezes the back half of the backbone blocks.
    pub fn prepare_phase2(&self) {
        self.prepare_phase1();
        let first_trainable = self.blocks.len() / 2;
        for b in &self.blocks[first_trainable..] {
            b.set_trainable(true);
        }
    }

    /// Makes every parameter trainable (or none of them).
    pub fn set_frozen(&self, frozen: bool) {
        self.frozen.set(frozen);
        self.set_trainable(!frozen);
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.get() && self.params().iter().all(|p| !p.is_trainable())
    }
}

impl<T: Elem> Module<T> for Classifier<T> {
    fn params(&self) -> Vec<Param<T>> {
        let mut v = self.adapter.params();
        v.extend(self.backbone_params());
        v.extend(self.head.params());
        v
    }

    fn buffers(&self) -> Vec<Buffer<T>> {
        self.blocks.iter().flat_map(|b| b.buffers()).collect()
    }
}
