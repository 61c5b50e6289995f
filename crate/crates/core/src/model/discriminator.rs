use defectda_tensor::{Conv2dOpts, Elem, Param, Var};
use rand::Rng;

use super::aligner::MIN_SIDE;
use super::layers::{collect, instance_norm, Conv2d, Module};
use crate::error::{Error, Result};

pub const DEFAULT_DISCRIMINATOR_WIDTH: usize = 16;
const LRELU: f64 = 0.2;
const MIN_DILATED: usize = 2;

/// Two strided convolutions followed by a dilated stack with doubling
/// dilation, grown until the receptive field covers half the input.
pub struct Discriminator<T: Elem = f32> {
    pub input_side: usize,
    pub width: usize,
    stem: [Conv2d<T>; 2],
    dilated: Vec<Conv2d<T>>,
    out: Conv2d<T>,
}

/// Output of one discriminator pass.
pub struct DiscOutput<T: Elem> {
    /// Post-activation output of every layer; the last entry is the
    /// per-image pre-sigmoid logit of shape `(N, 1)`.
    pub taps: Vec<Var<T>>,
    /// `sigmoid(logit)`, shape `(N, 1)`.
    pub prob: Var<T>,
}

impl<T: Elem> DiscOutput<T> {
    pub fn logit(&self) -> &Var<T> {
        self.taps.last().expect("at least one tap")
    }
}

/// Receptive field of the stem plus `n` dilated layers.
pub fn receptive_field(n_dilated: usize) -> usize {
    // two k=4, s=2 convs: rf 4 then 10, jump 4
    let (mut rf, jump) = (10, 4);
    for i in 0..n_dilated {
        rf += 2 * (1 << (i + 1)) * jump;
    }
    rf
}

pub fn dilated_layers_for(side: usize) -> usize {
    let mut n = MIN_DILATED;
    while receptive_field(n) < side / 2 {
        n += 1;
    }
    n
}

impl<T: Elem> Discriminator<T> {
    pub fn build<R: Rng>(input_side: usize, width: usize, rng: &mut R) -> Result<Self> {
        if input_side < MIN_SIDE || input_side % 4 != 0 {
            return Err(Error::InvalidSide(input_side));
        }
        if width == 0 {
            return Err(Error::InvalidArgument("discriminator width must be positive".into()));
        }
        let w = width;
        let s2 = Conv2dOpts::new(2, 1, 1);
        let stem = [
            Conv2d::new("d.c1", 1, w, 4, s2, true, rng),
            Conv2d::new("d.c2", w, 2 * w, 4, s2, false, rng),
        ];
        let dilated = (0..dilated_layers_for(input_side))
            .map(|i| {
                let d = 1 << (i + 1);
                Conv2d::new(&format!("d.dil{d}"), 2 * w, 2 * w, 3, Conv2dOpts::same(3, d), false, rng)
            })
            .collect();
        let out = Conv2d::new("d.out", 2 * w, 1, 3, Conv2dOpts::same(3, 1), true, rng);
        Ok(Discriminator { input_side, width, stem, dilated, out })
    }

    /// Number of taps L, including the output logit.
    pub fn num_layers(&self) -> usize {
        self.stem.len() + self.dilated.len() + 1
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(self.dilated.len())
    }

    pub fn forward(&self, x: &Var<T>) -> DiscOutput<T> {
        let slope = T::of(LRELU);
        let mut taps = Vec::with_capacity(self.num_layers());
        let h = self.stem[0].forward(x).leaky_relu(slope);
        taps.push(h.clone());
        let mut h = instance_norm(&self.stem[1].forward(&h)).leaky_relu(slope);
        taps.push(h.clone());
        for c in &self.dilated {
            h = instance_norm(&c.forward(&h)).leaky_relu(slope);
            taps.push(h.clone());
        }
        let logit = self.out.forward(&h).mean_axes(&[2, 3], false);
        let prob = logit.sigmoid();
        taps.push(logit);
        DiscOutput { taps, prob }
    }
}

impl<T: Elem> Module<T> for Discriminator<T> {
    fn params(&self) -> Vec<Param<T>> {
        let mut mods: Vec<&dyn Module<T>> = vec![&self.stem[0], &self.stem[1]];
        mods.extend(self.dilated.iter().map(|c| c as &dyn Module<T>));
        mods.push(&self.out);
        collect(&mods)
    }
}
