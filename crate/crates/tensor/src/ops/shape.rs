use ndarray::{concatenate, ArrayD, ArrayView2, Axis, Ix2, IxDyn, Slice};

use crate::{Elem, Var};

impl<T: Elem> Var<T> {
    pub fn sum(&self) -> Var<T> {
        let s: T = self.value().iter().copied().sum();
        Var::from_op(
            ArrayD::from_elem(IxDyn(&[]), s),
            vec![self.clone()],
            Box::new(|g, ps, _| {
                let gv = *g.iter().next().unwrap();
                vec![Some(ArrayD::from_elem(ps[0].value().raw_dim(), gv))]
            }),
        )
    }

    pub fn mean(&self) -> Var<T> {
        let n = T::of(self.len() as f64);
        self.sum().mul_scalar(T::one() / n)
    }

    /// Sums over `axes`; removed axes are kept with length 1 when `keepdim`.
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Var<T> {
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut out = self.value().clone();
        for &ax in sorted.iter().rev() {
            out = out.sum_axis(Axis(ax));
            if keepdim {
                out = out.insert_axis(Axis(ax));
            }
        }
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, ps, _| {
                let mut g = g.clone();
                if !keepdim {
                    for &ax in &sorted {
                        g = g.insert_axis(Axis(ax));
                    }
                }
                let full = g
                    .broadcast(ps[0].value().raw_dim())
                    .expect("sum_axes broadcast")
                    .to_owned();
                vec![Some(full)]
            }),
        )
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Var<T> {
        let n: usize = axes.iter().map(|&a| self.shape()[a]).product();
        self.sum_axes(axes, keepdim).mul_scalar(T::one() / T::of(n as f64))
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<T> {
        let v = self.value().as_standard_layout().into_owned();
        let out = v
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|e| panic!("reshape {:?} -> {:?}: {e}", self.shape(), shape));
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(|g, ps, _| {
                let g = g.as_standard_layout().into_owned();
                vec![Some(g.into_shape_with_order(ps[0].value().raw_dim()).unwrap())]
            }),
        )
    }

    pub fn flatten_from(&self, axis: usize) -> Var<T> {
        let mut shape: Vec<usize> = self.shape()[..axis].to_vec();
        shape.push(self.shape()[axis..].iter().product());
        self.reshape(&shape)
    }

    pub fn permute(&self, axes: &[usize]) -> Var<T> {
        let out = self
            .value()
            .clone()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                vec![Some(
                    g.clone()
                        .permuted_axes(IxDyn(&inverse))
                        .as_standard_layout()
                        .into_owned(),
                )]
            }),
        )
    }

    /// Concatenates along `axis`.
    pub fn cat(parts: &[&Var<T>], axis: usize) -> Var<T> {
        assert!(!parts.is_empty(), "cat of nothing");
        let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
        let out = concatenate(Axis(axis), &views).expect("cat shape mismatch");
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Var::from_op(
            out,
            parts.iter().map(|p| (*p).clone()).collect(),
            Box::new(move |g, ps, _| {
                let mut start = 0;
                lens.iter()
                    .zip(ps)
                    .map(|(&len, p)| {
                        let s = start;
                        start += len;
                        p.requires_grad().then(|| {
                            g.slice_axis(Axis(axis), Slice::from(s..s + len)).to_owned()
                        })
                    })
                    .collect()
            }),
        )
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<T> {
        assert!(start + len <= self.shape()[axis], "narrow out of range");
        let out = self
            .value()
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, ps, _| {
                let mut full = ArrayD::zeros(ps[0].value().raw_dim());
                full.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(g);
                vec![Some(full)]
            }),
        )
    }

    /// Gathers entries along axis 0.
    pub fn select_rows(&self, idx: &[usize]) -> Var<T> {
        let out = self.value().select(Axis(0), idx);
        let idx = idx.to_vec();
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, ps, _| {
                let mut full = ArrayD::zeros(ps[0].value().raw_dim());
                for (k, &i) in idx.iter().enumerate() {
                    let mut dst = full.index_axis_mut(Axis(0), i);
                    dst += &g.index_axis(Axis(0), k);
                }
                vec![Some(full)]
            }),
        )
    }

    /// Rank-2 matrix product.
    pub fn matmul(&self, other: &Var<T>) -> Var<T> {
        let a = as2(self.value());
        let b = as2(other.value());
        assert_eq!(a.ncols(), b.nrows(), "matmul inner dims");
        let out = a.dot(&b).into_dyn();
        Var::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g, ps, _| {
                let g2 = as2(g);
                let a = as2(ps[0].value());
                let b = as2(ps[1].value());
                vec![
                    ps[0].requires_grad().then(|| g2.dot(&b.t()).into_dyn()),
                    ps[1].requires_grad().then(|| a.t().dot(&g2).into_dyn()),
                ]
            }),
        )
    }
}

fn as2<T: Elem>(a: &ArrayD<T>) -> ArrayView2<'_, T> {
    a.view()
        .into_dimensionality::<Ix2>()
        .unwrap_or_else(|_| panic!("expected rank-2 tensor, got {:?}", a.shape()))
}
