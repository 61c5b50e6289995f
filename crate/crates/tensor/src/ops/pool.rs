use ndarray::{ArrayD, IxDyn};

use crate::par;
use crate::{Elem, Var};

fn nchw(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected NCHW tensor, got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

impl<T: Elem> Var<T> {
    /// Non-overlapping `k`×`k` max pooling (trailing rows/columns dropped).
    pub fn max_pool2d(&self, k: usize) -> Var<T> {
        let (n, c, h, w) = nchw(self.shape());
        let (ho, wo) = (h / k, w / k);
        assert!(ho > 0 && wo > 0, "max_pool2d: input {h}x{w} smaller than window {k}");
        let x = self.value().as_standard_layout();
        let xs = x.as_slice().unwrap();
        let planes = n * c;
        let results = par::map_range(par::default_exec(), planes, |pc| {
            let src = &xs[pc * h * w..][..h * w];
            let mut vals = Vec::with_capacity(ho * wo);
            let mut arg = Vec::with_capacity(ho * wo);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = oy * k * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = (oy * k + dy) * w + ox * k + dx;
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                    }
                    vals.push(src[best]);
                    arg.push(best as u32);
                }
            }
            (vals, arg)
        });
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for (v, a) in results {
            out.extend(v);
            argmax.extend(a);
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[n, c, ho, wo]), out).unwrap();
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let g = g.as_standard_layout();
                let gs = g.as_slice().unwrap();
                let mut dx = vec![T::zero(); planes * h * w];
                for pc in 0..planes {
                    for j in 0..ho * wo {
                        let o = pc * ho * wo + j;
                        dx[pc * h * w + argmax[o] as usize] += gs[o];
                    }
                }
                vec![Some(ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap())]
            }),
        )
    }

    /// Non-overlapping `k`×`k` average pooling (trailing rows/columns dropped).
    pub fn avg_pool2d(&self, k: usize) -> Var<T> {
        let (n, c, h, w) = nchw(self.shape());
        let (ho, wo) = (h / k, w / k);
        assert!(ho > 0 && wo > 0, "avg_pool2d: input {h}x{w} smaller than window {k}");
        let x = self.value().as_standard_layout();
        let xs = x.as_slice().unwrap();
        let scale = T::one() / T::of((k * k) as f64);
        let mut out = vec![T::zero(); n * c * ho * wo];
        for pc in 0..n * c {
            let src = &xs[pc * h * w..];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::zero();
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += src[(oy * k + dy) * w + ox * k + dx];
                        }
                    }
                    out[pc * ho * wo + oy * wo + ox] = acc * scale;
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[n, c, ho, wo]), out).unwrap();
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let g = g.as_standard_layout();
                let gs = g.as_slice().unwrap();
                let mut dx = vec![T::zero(); n * c * h * w];
                for pc in 0..n * c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = gs[pc * ho * wo + oy * wo + ox] * scale;
                            for dy in 0..k {
                                for ddx in 0..k {
                                    dx[pc * h * w + (oy * k + dy) * w + ox * k + ddx] += gv;
                                }
                            }
                        }
                    }
                }
                vec![Some(ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap())]
            }),
        )
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, f: usize) -> Var<T> {
        let (n, c, h, w) = nchw(self.shape());
        let (ho, wo) = (h * f, w * f);
        let x = self.value().as_standard_layout();
        let xs = x.as_slice().unwrap();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for pc in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    out[pc * ho * wo + oy * wo + ox] = xs[pc * h * w + (oy / f) * w + ox / f];
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[n, c, ho, wo]), out).unwrap();
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let g = g.as_standard_layout();
                let gs = g.as_slice().unwrap();
                let mut dx = vec![T::zero(); n * c * h * w];
                for pc in 0..n * c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            dx[pc * h * w + (oy / f) * w + ox / f] += gs[pc * ho * wo + oy * wo + ox];
                        }
                    }
                }
                vec![Some(ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap())]
            }),
        )
    }
}
