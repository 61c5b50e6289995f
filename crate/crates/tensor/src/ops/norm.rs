use ndarray::{Array1, ArrayD, IxDyn};

use crate::{Elem, Var};

/// Per-channel statistics of one normalization call.
#[derive(Clone, Debug)]
pub struct ChannelStats<T> {
    pub mean: Array1<T>,
    /// Biased variance.
    pub var: Array1<T>,
}

fn channel_view(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "channel ops need rank >= 2, got {shape:?}");
    let rest: usize = shape[2..].iter().product();
    (shape[0], shape[1], rest)
}

/// Per-channel sums over contiguous `rest`-long runs.
fn channel_sums<T: Elem>(data: &[T], c: usize, rest: usize, f: impl Fn(usize, T) -> T) -> Vec<T> {
    let mut acc = vec![T::zero(); c];
    for (i, run) in data.chunks(rest).enumerate() {
        let ci = i % c;
        let mut s = T::zero();
        for (j, &v) in run.iter().enumerate() {
            s += f(i * rest + j, v);
        }
        acc[ci] += s;
    }
    acc
}

fn map_runs<T: Elem>(data: &mut [T], c: usize, rest: usize, f: impl Fn(usize, usize, &mut T)) {
    for (i, run) in data.chunks_mut(rest).enumerate() {
        let ci = i % c;
        for (j, v) in run.iter_mut().enumerate() {
            f(ci, i * rest + j, v);
        }
    }
}

impl<T: Elem> Var<T> {
    /// Standardizes each channel (axis 1) over all other axes.
    ///
    /// This is the parameter-free half of batch normalization; instance
    /// normalization is the same op applied to a `(1, N*C, H, W)` view.
    pub fn normalize_channels(&self, eps: T) -> (Var<T>, ChannelStats<T>) {
        let (n, c, rest) = channel_view(self.shape());
        let x = self.value().as_standard_layout();
        let xs = x.as_slice().unwrap();
        let m = T::of((n * rest) as f64);
        let mean: Vec<T> = channel_sums(xs, c, rest, |_, v| v).into_iter().map(|s| s / m).collect();
        let var: Vec<T> = {
            let mut acc = vec![T::zero(); c];
            for (i, run) in xs.chunks(rest).enumerate() {
                let mu = mean[i % c];
                acc[i % c] += run.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
            }
            acc.into_iter().map(|s| s / m).collect()
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = xs.to_vec();
        map_runs(&mut xhat, c, rest, |ci, _, v| *v = (*v - mean[ci]) * inv_std[ci]);
        let out = ArrayD::from_shape_vec(self.value().raw_dim(), xhat).unwrap();
        let stats = ChannelStats {
            mean: Array1::from(mean),
            var: Array1::from(var),
        };
        let v = Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _, y| {
                let g = g.as_standard_layout();
                let gs = g.as_slice().unwrap();
                let ys = y.as_slice().unwrap();
                let sum_g = channel_sums(gs, c, rest, |_, v| v);
                let sum_gy = channel_sums(gs, c, rest, |k, v| v * ys[k]);
                let mut dx = gs.to_vec();
                map_runs(&mut dx, c, rest, |ci, k, d| {
                    *d = inv_std[ci] * (*d - sum_g[ci] / m - ys[k] * sum_gy[ci] / m);
                });
                vec![Some(ArrayD::from_shape_vec(g.raw_dim(), dx).unwrap())]
            }),
        );
        (v, stats)
    }

    /// `y[:, c, ...] = x[:, c, ...] * scale[c] + shift[c]`.
    pub fn channel_affine(&self, scale: &Var<T>, shift: &Var<T>) -> Var<T> {
        let (_, c, rest) = channel_view(self.shape());
        assert_eq!(scale.shape(), &[c], "channel_affine scale shape");
        assert_eq!(shift.shape(), &[c], "channel_affine shift shape");
        let s: Vec<T> = scale.value().iter().copied().collect();
        let b: Vec<T> = shift.value().iter().copied().collect();
        let mut y = self.value().as_standard_layout().into_owned();
        map_runs(y.as_slice_mut().unwrap(), c, rest, |ci, _, v| *v = *v * s[ci] + b[ci]);
        Var::from_op(
            y,
            vec![self.clone(), scale.clone(), shift.clone()],
            Box::new(move |g, ps, _| {
                let g = g.as_standard_layout();
                let gs = g.as_slice().unwrap();
                let dx = ps[0].requires_grad().then(|| {
                    let s: Vec<T> = ps[1].value().iter().copied().collect();
                    let mut dx = gs.to_vec();
                    map_runs(&mut dx, c, rest, |ci, _, v| *v *= s[ci]);
                    ArrayD::from_shape_vec(g.raw_dim(), dx).unwrap()
                });
                let dscale = ps[1].requires_grad().then(|| {
                    let x = ps[0].value().as_standard_layout();
                    let xs = x.as_slice().unwrap();
                    let acc = channel_sums(gs, c, rest, |k, v| v * xs[k]);
                    ArrayD::from_shape_vec(IxDyn(&[c]), acc).unwrap()
                });
                let dshift = ps[2].requires_grad().then(|| {
                    ArrayD::from_shape_vec(IxDyn(&[c]), channel_sums(gs, c, rest, |_, v| v)).unwrap()
                });
                vec![dx, dscale, dshift]
            }),
        )
    }
}
