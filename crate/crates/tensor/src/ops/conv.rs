use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, ArrayViewMut2, IxDyn};

use crate::par;
use crate::{Elem, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dOpts {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl Conv2dOpts {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        assert!(stride >= 1 && dilation >= 1);
        Self {
            stride,
            padding,
            dilation,
        }
    }

    /// Stride-1 padding that preserves spatial size for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self::new(1, dilation * (kernel - 1) / 2, dilation)
    }
}

pub fn conv_out_size(input: usize, kernel: usize, o: Conv2dOpts) -> usize {
    let eff = o.dilation * (kernel - 1) + 1;
    assert!(
        input + 2 * o.padding >= eff,
        "kernel {kernel} (dilation {}) larger than padded input {input}",
        o.dilation
    );
    (input + 2 * o.padding - eff) / o.stride + 1
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    o: Conv2dOpts,
}

impl Geom {
    fn new(x: &[usize], k: &[usize], o: Conv2dOpts) -> Self {
        assert_eq!(x.len(), 4, "conv input must be NCHW, got {x:?}");
        assert_eq!(k.len(), 4, "conv weight must be OCkk, got {k:?}");
        let (n, c, h, w) = (x[0], x[1], x[2], x[3]);
        let (kh, kw) = (k[2], k[3]);
        Geom {
            n,
            c,
            h,
            w,
            kh,
            kw,
            ho: conv_out_size(h, kh, o),
            wo: conv_out_size(w, kw, o),
            o,
        }
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn chw(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Output columns `lo..hi` whose source column for kernel tap `k` is in bounds.
    fn valid_range(&self, k: usize, size: usize, out: usize) -> (usize, usize) {
        let off = k * self.o.dilation;
        let s = self.o.stride;
        let p = self.o.padding;
        let lo = if off >= p { 0 } else { (p - off).div_ceil(s) };
        // need ox*s + off - p <= size - 1
        let hi = if size + p > off { ((size + p - off - 1) / s + 1).min(out) } else { 0 };
        (lo.min(out), hi)
    }

    #[inline]
    fn src(&self, out_pos: usize, k: usize, size: usize) -> Option<usize> {
        let i = (out_pos * self.o.stride + k * self.o.dilation) as isize - self.o.padding as isize;
        (i >= 0 && (i as usize) < size).then_some(i as usize)
    }
}

/// Fills `out` (`ckk` rows × `positions` columns) for one sample.
fn im2col_sample<T: Elem>(x: &[T], g: &Geom, out: &mut [T]) {
    let hw = g.h * g.w;
    let p = g.positions();
    let mut row = 0;
    for ci in 0..g.c {
        let plane = &x[ci * hw..][..hw];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut out[row * p..][..p];
                row += 1;
                let (lo, hi) = g.valid_range(kx, g.w, g.wo);
                for oy in 0..g.ho {
                    let seg = &mut dst[oy * g.wo..][..g.wo];
                    let Some(iy) = g.src(oy, ky, g.h) else {
                        seg.fill(T::zero());
                        continue;
                    };
                    let line = &plane[iy * g.w..][..g.w];
                    seg[..lo].fill(T::zero());
                    seg[hi.max(lo)..].fill(T::zero());
                    if lo < hi {
                        let x0 = lo * g.o.stride + kx * g.o.dilation - g.o.padding;
                        if g.o.stride == 1 {
                            seg[lo..hi].copy_from_slice(&line[x0..x0 + (hi - lo)]);
                        } else {
                            for (k, v) in seg[lo..hi].iter_mut().enumerate() {
                                *v = line[x0 + k * g.o.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` (`ckk` × `positions`) back into one sample's gradient.
fn col2im_sample<T: Elem>(cols: &[T], g: &Geom, dx: &mut [T]) {
    let hw = g.h * g.w;
    let p = g.positions();
    let mut row = 0;
    for ci in 0..g.c {
        let plane = &mut dx[ci * hw..][..hw];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &cols[row * p..][..p];
                row += 1;
                let (lo, hi) = g.valid_range(kx, g.w, g.wo);
                if lo >= hi {
                    continue;
                }
                let x0 = lo * g.o.stride + kx * g.o.dilation - g.o.padding;
                for oy in 0..g.ho {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    let seg = &src[oy * g.wo..][..g.wo];
                    let line = &mut plane[iy * g.w..][..g.w];
                    if g.o.stride == 1 {
                        for (d, &v) in line[x0..x0 + (hi - lo)].iter_mut().zip(&seg[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for (k, &v) in seg[lo..hi].iter().enumerate() {
                            line[x0 + k * g.o.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

fn mat<T>(data: &[T], rows: usize, cols: usize) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((rows, cols), data).unwrap()
}

fn mat_mut<T>(data: &mut [T], rows: usize, cols: usize) -> ArrayViewMut2<'_, T> {
    ArrayViewMut2::from_shape((rows, cols), data).unwrap()
}

fn weight_matrix<T: Elem>(w: &[T], o: usize, ckk: usize) -> ArrayView2<'_, T> {
    mat(w, o, ckk)
}

impl<T: Elem> Var<T> {
    /// 2-D cross-correlation. `weight` is `(out, in, kh, kw)`, `bias` is `(out,)`.
    pub fn conv2d(&self, weight: &Var<T>, bias: Option<&Var<T>>, opts: Conv2dOpts) -> Var<T> {
        let g = Geom::new(self.shape(), weight.shape(), opts);
        assert_eq!(g.c, weight.shape()[1], "conv channel mismatch");
        let oc = weight.shape()[0];
        let (ckk, p) = (g.ckk(), g.positions());
        let x = self.value().as_standard_layout();
        let xs = x.as_slice().unwrap();
        let w = weight.value().as_standard_layout();
        let w2 = weight_matrix(w.as_slice().unwrap(), oc, ckk);
        let bias_v: Option<Vec<T>> = bias.map(|b| {
            assert_eq!(b.shape(), &[oc], "conv bias shape");
            b.value().iter().copied().collect()
        });
        let mut out = vec![T::zero(); g.n * oc * p];
        par::for_each_chunk_mut(par::default_exec(), &mut out, oc * p, |n, o| {
            let mut cols = vec![T::zero(); ckk * p];
            im2col_sample(&xs[n * g.chw()..][..g.chw()], &g, &mut cols);
            if let Some(bv) = &bias_v {
                for (row, &b) in o.chunks_mut(p).zip(bv) {
                    row.fill(b);
                }
            }
            let beta = if bias_v.is_some() { T::one() } else { T::zero() };
            general_mat_mul(T::one(), &w2, &mat(&cols, ckk, p), beta, &mut mat_mut(o, oc, p));
        });
        let out = ArrayD::from_shape_vec(IxDyn(&[g.n, oc, g.ho, g.wo]), out).unwrap();
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Var::from_op(
            out,
            parents,
            Box::new(move |gout, ps, _| {
                let exec = par::default_exec();
                let gout = gout.as_standard_layout();
                let gs = gout.as_slice().unwrap();
                let w = ps[1].value().as_standard_layout();
                let w2 = weight_matrix(w.as_slice().unwrap(), oc, ckk);
                let dx = ps[0].requires_grad().then(|| {
                    let mut dx = vec![T::zero(); g.n * g.chw()];
                    par::for_each_chunk_mut(exec, &mut dx, g.chw(), |n, d| {
                        let mut dcols = vec![T::zero(); ckk * p];
                        let gn = mat(&gs[n * oc * p..][..oc * p], oc, p);
                        general_mat_mul(T::one(), &w2.t(), &gn, T::zero(), &mut mat_mut(&mut dcols, ckk, p));
                        col2im_sample(&dcols, &g, d);
                    });
                    ArrayD::from_shape_vec(IxDyn(&[g.n, g.c, g.h, g.w]), dx).unwrap()
                });
                let dw = ps[1].requires_grad().then(|| {
                    let x = ps[0].value().as_standard_layout();
                    let xs = x.as_slice().unwrap();
                    // Per-sample partial products, summed in sample order.
                    let parts = par::map_range(exec, g.n, |n| {
                        let mut cols = vec![T::zero(); ckk * p];
                        im2col_sample(&xs[n * g.chw()..][..g.chw()], &g, &mut cols);
                        let gn = mat(&gs[n * oc * p..][..oc * p], oc, p);
                        gn.dot(&mat(&cols, ckk, p).t())
                    });
                    let mut dw = Array2::<T>::zeros((oc, ckk));
                    for part in parts {
                        dw += &part;
                    }
                    dw.into_shape_with_order(ps[1].value().raw_dim()).unwrap()
                });
                let mut grads = vec![dx, dw];
                if ps.len() == 3 {
                    grads.push(ps[2].requires_grad().then(|| {
                        let mut db = vec![T::zero(); oc];
                        for n in 0..g.n {
                            for (c, row) in gs[n * oc * p..][..oc * p].chunks(p).enumerate() {
                                db[c] += row.iter().copied().sum::<T>();
                            }
                        }
                        ArrayD::from_shape_vec(IxDyn(&[oc]), db).unwrap()
                    }));
                }
                grads
            }),
        )
    }

    /// Per-channel convolution; `weight` is `(channels, 1, kh, kw)`.
    pub fn depthwise_conv2d(&self, weight: &Var<T>, opts: Conv2dOpts) -> Var<T> {
        let g = Geom::new(self.shape(), weight.shape(), opts);
        assert_eq!(weight.shape()[0], g.c, "depthwise channel mismatch");
        assert_eq!(weight.shape()[1], 1, "depthwise weight must have one input channel");
        let exec = par::default_exec();
        let x = self.value().as_standard_layout().into_owned();
        let wv = weight.value().as_standard_layout().into_owned();
        let (xs, ws) = (x.as_slice().unwrap(), wv.as_slice().unwrap());
        let out_plane = g.ho * g.wo;
        let mut out = vec![T::zero(); g.n * g.c * out_plane];
        par::for_each_chunk_mut(exec, &mut out, out_plane, |nc, plane| {
            let ci = nc % g.c;
            let src = &xs[nc * g.h * g.w..][..g.h * g.w];
            let k = &ws[ci * g.kh * g.kw..][..g.kh * g.kw];
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = T::zero();
                    for ky in 0..g.kh {
                        let Some(iy) = g.src(oy, ky, g.h) else { continue };
                        for kx in 0..g.kw {
                            if let Some(ix) = g.src(ox, kx, g.w) {
                                acc += src[iy * g.w + ix] * k[ky * g.kw + kx];
                            }
                        }
                    }
                    plane[oy * g.wo + ox] = acc;
                }
            }
        });
        let out = ArrayD::from_shape_vec(IxDyn(&[g.n, g.c, g.ho, g.wo]), out).unwrap();
        Var::from_op(
            out,
            vec![self.clone(), weight.clone()],
            Box::new(move |gout, ps, _| {
                let gout = gout.as_standard_layout().into_owned();
                let gs = gout.as_slice().unwrap();
                let x = ps[0].value().as_standard_layout().into_owned();
                let wv = ps[1].value().as_standard_layout().into_owned();
                let (xs, ws) = (x.as_slice().unwrap(), wv.as_slice().unwrap());
                let mut dx = vec![T::zero(); g.n * g.c * g.h * g.w];
                let mut dw = vec![T::zero(); g.c * g.kh * g.kw];
                for nc in 0..g.n * g.c {
                    let ci = nc % g.c;
                    let src = &xs[nc * g.h * g.w..][..g.h * g.w];
                    let gp = &gs[nc * out_plane..][..out_plane];
                    let k = &ws[ci * g.kh * g.kw..][..g.kh * g.kw];
                    for oy in 0..g.ho {
                        for ox in 0..g.wo {
                            let gv = gp[oy * g.wo + ox];
                            for ky in 0..g.kh {
                                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                                for kx in 0..g.kw {
                                    if let Some(ix) = g.src(ox, kx, g.w) {
                                        dx[nc * g.h * g.w + iy * g.w + ix] += gv * k[ky * g.kw + kx];
                                        dw[ci * g.kh * g.kw + ky * g.kw + kx] += gv * src[iy * g.w + ix];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![
                    ps[0].requires_grad()
                        .then(|| ArrayD::from_shape_vec(ps[0].value().raw_dim(), dx).unwrap()),
                    ps[1].requires_grad()
                        .then(|| ArrayD::from_shape_vec(ps[1].value().raw_dim(), dw).unwrap()),
                ]
            }),
        )
    }
}
