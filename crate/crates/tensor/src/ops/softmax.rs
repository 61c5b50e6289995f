use ndarray::{ArrayD, Axis, Zip};

use crate::{Elem, Var};

impl<T: Elem> Var<T> {
    /// Row-wise log-softmax of a `(batch, classes)` tensor.
    pub fn log_softmax(&self) -> Var<T> {
        assert_eq!(self.ndim(), 2, "log_softmax expects (batch, classes)");
        let mut out = self.value().clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
            row.mapv_inplace(|v| v - lse);
        }
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(|g, _, y| {
                let gsum = g.sum_axis(Axis(1));
                let mut dx = ArrayD::zeros(g.raw_dim());
                for (i, mut row) in dx.axis_iter_mut(Axis(0)).enumerate() {
                    let gs = gsum[[i]];
                    Zip::from(&mut row)
                        .and(g.index_axis(Axis(0), i))
                        .and(y.index_axis(Axis(0), i))
                        .for_each(|d, &gv, &yv| *d = gv - yv.exp() * gs);
                }
                vec![Some(dx)]
            }),
        )
    }

    pub fn softmax(&self) -> Var<T> {
        self.log_softmax().exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn rows_sum_to_one_even_for_large_logits() {
        let z = Var::<f32>::constant(arr2(&[[1000.0, 0.0], [-3.0, 2.0]]).into_dyn());
        let p = z.softmax();
        for row in p.value().axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn log_softmax_gradient_sums_to_zero_per_row() {
        let z = Var::<f64>::leaf(arr2(&[[0.3, -1.2, 2.0]]).into_dyn());
        let w = Var::constant(arr2(&[[1.0, 2.0, -0.5]]).into_dyn());
        let g = z.log_softmax().mul(&w).sum().backward();
        assert!(g.get(&z).unwrap().sum().abs() < 1e-12);
    }
}
