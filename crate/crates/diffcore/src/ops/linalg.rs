use crate::error::{DiffError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

impl<T: Real> Tensor<T> {
    /// Matrix product over the last two axes.
    ///
    /// `rhs` may be a plain `[k, n]` matrix (shared across every leading
    /// axis of `self`) or carry the same leading axes as `self`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() < 2 || rhs.rank() < 2 {
            return Err(DiffError::shape("matmul", self.shape(), rhs.shape()));
        }
        let (ra, rb) = (self.rank(), rhs.rank());
        let (m, k) = (self.shape()[ra - 2], self.shape()[ra - 1]);
        let (k2, n) = (rhs.shape()[rb - 2], rhs.shape()[rb - 1]);
        if k != k2 {
            return Err(DiffError::shape("matmul", self.shape(), rhs.shape()));
        }
        if rb == 2 {
            return self.matmul_shared(rhs, k, n);
        }
        if self.shape()[..ra - 2] != rhs.shape()[..rb - 2] {
            return Err(DiffError::shape("matmul", self.shape(), rhs.shape()));
        }
        let batch: usize = self.shape()[..ra - 2].iter().product();
        let (a, b) = (self.data_arc().clone(), rhs.data_arc().clone());
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &a[i * m * k..],
                false,
                &b[i * k * n..],
                false,
                &mut out[i * m * n..],
                T::zero(),
            );
        }
        let mut shape = self.shape().to_vec();
        shape[ra - 1] = n;
        let (ia, ib) = (self.node_id(), rhs.node_id());
        Tensor::from_op(shape, out, &[self, rhs], move |g, sink| {
            if let Some(ga) = sink.slot(ia) {
                for i in 0..batch {
                    // dA = G B^T
                    T::gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..],
                        false,
                        &b[i * k * n..],
                        true,
                        &mut ga[i * m * k..],
                        T::one(),
                    );
                }
            }
            if let Some(gb) = sink.slot(ib) {
                for i in 0..batch {
                    // dB = A^T G
                    T::gemm(
                        k,
                        m,
                        n,
                        &a[i * m * k..],
                        true,
                        &g[i * m * n..],
                        false,
                        &mut gb[i * k * n..],
                        T::one(),
                    );
                }
            }
        })
    }

    /// `[.., m, k] x [k, n]`: the leading axes fold into rows of one product.
    fn matmul_shared(&self, rhs: &Tensor<T>, k: usize, n: usize) -> Result<Tensor<T>> {
        let rows: usize = self.shape()[..self.rank() - 1].iter().product();
        let (a, b) = (self.data_arc().clone(), rhs.data_arc().clone());
        let mut out = vec![T::zero(); rows * n];
        T::gemm(rows, k, n, &a, false, &b, false, &mut out, T::zero());
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let (ia, ib) = (self.node_id(), rhs.node_id());
        Tensor::from_op(shape, out, &[self, rhs], move |g, sink| {
            if let Some(ga) = sink.slot(ia) {
                T::gemm(rows, n, k, g, false, &b, true, ga, T::one());
            }
            if let Some(gb) = sink.slot(ib) {
                T::gemm(k, rows, n, &a, true, g, false, gb, T::one());
            }
        })
    }

    /// Affine map over the last axis: `x W + b` with `W: [in, out]`, `b: [out]`.
    pub fn linear(&self, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        if w.rank() != 2 {
            return Err(DiffError::arg("linear", "weight must be [in, out]"));
        }
        let y = self.matmul(w)?;
        match b {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::{Graph, Tensor};

    #[test]
    fn shared_rhs_folds_batches() {
        let a = Tensor::<f64>::from_f64(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[2, 1], &[1.0, 1.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1, 1]);
        assert_eq!(c.values(), &[3.0, 7.0]);
    }

    #[test]
    fn batched_gradients() {
        let g = Graph::<f64>::new();
        let a = g.leaf(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = g.leaf(&[2, 2, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.values(), &[1.0, 4.0]);
        g.backward(&c.sum_all().unwrap()).unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn inner_dimension_mismatch_is_reported() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"));
    }
}
