use std::fmt;
use std::str::FromStr;

use defectda_tensor::{init, Conv2dOpts, Elem, Param, Var};
use rand::Rng;

use super::layers::{collect, instance_norm, Conv2d, Module};
use crate::error::{Error, Result};

pub const MIN_SIDE: usize = 32;
pub const DEFAULT_ALIGNER_WIDTH: usize = 16;
const LRELU: f64 = 0.2;
const PIXEL_EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    /// F: target to source.
    TargetToSource,
    /// G: source to target.
    SourceToTarget,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::TargetToSource => "target_to_source",
            Direction::SourceToTarget => "source_to_target",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target_to_source" | "F" => Ok(Direction::TargetToSource),
            "source_to_target" | "G" => Ok(Direction::SourceToTarget),
            _ => Err(Error::InvalidArgument(format!("unknown aligner direction {s:?}"))),
        }
    }
}

/// Three-level U-Net. The last decoder stage sees the raw input through a
/// skip, and the output is a residual in logit space:
/// `sigmoid(logit(x) + head(u))`. The head starts at zero so a fresh aligner
/// is the identity map.
pub struct Aligner<T: Elem = f32> {
    pub direction: Direction,
    pub input_side: usize,
    pub width: usize,
    down: [Conv2d<T>; 3],
    up: [Conv2d<T>; 3],
    head: Conv2d<T>,
}

impl<T: Elem> Aligner<T> {
    pub fn build<R: Rng>(direction: Direction, input_side: usize, width: usize, rng: &mut R) -> Result<Self> {
        if input_side < MIN_SIDE || input_side % 8 != 0 {
            return Err(Error::InvalidSide(input_side));
        }
        if width == 0 {
            return Err(Error::InvalidArgument("aligner width must be positive".into()));
        }
        let w = width;
        let s2 = Conv2dOpts::new(2, 1, 1);
        let same = Conv2dOpts::same(3, 1);
        let down = [
            Conv2d::new("down1", 1, w, 4, s2, true, rng),
            Conv2d::new("down2", w, 2 * w, 4, s2, false, rng),
            Conv2d::new("down3", 2 * w, 4 * w, 4, s2, false, rng),
        ];
        let up = [
            Conv2d::new("up3", 4 * w, 2 * w, 3, same, false, rng),
            Conv2d::new("up2", 4 * w, w, 3, same, false, rng),
            Conv2d::new("up1", 2 * w, w, 3, same, false, rng),
        ];
        let head = Conv2d {
            weight: Param::new("head.weight", init::zeros(&[1, w + 1, 3, 3])),
            bias: Some(Param::new("head.bias", init::zeros(&[1]))),
            opts: same,
        };
        Ok(Aligner { direction, input_side, width, down, up, head })
    }

    /// Maps an `(N, 1, side, side)` batch in [0,1] to the same shape.
    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        let slope = T::of(LRELU);
        let d1 = self.down[0].forward(x).leaky_relu(slope);
        let d2 = instance_norm(&self.down[1].forward(&d1)).leaky_relu(slope);
        let d3 = instance_norm(&self.down[2].forward(&d2)).leaky_relu(slope);
        let u = instance_norm(&self.up[0].forward(&d3.upsample_nearest(2))).relu();
        let u = Var::cat(&[&u, &d2], 1);
        let u = instance_norm(&self.up[1].forward(&u.upsample_nearest(2))).relu();
        let u = Var::cat(&[&u, &d1], 1);
        let u = instance_norm(&self.up[2].forward(&u.upsample_nearest(2))).relu();
        let u = Var::cat(&[&u, x], 1);
        let xc = x.clamp(T::of(PIXEL_EPS), T::of(1.0 - PIXEL_EPS));
        let logit = xc.ln().sub(&xc.rsub_scalar(T::one()).ln());
        logit.add(&self.head.forward(&u)).sigmoid()
    }
}

impl<T: Elem> Module<T> for Aligner<T> {
    fn params(&self) -> Vec<Param<T>> {
        let [a, b, c] = &self.down;
        let [d, e, f] = &self.up;
        collect(&[a, b, c, d, e, f, &self.head])
    }
}
