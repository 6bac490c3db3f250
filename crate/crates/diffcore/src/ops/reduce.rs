use crate::error::{DiffError, Result};
use crate::kernels::accumulate;
use crate::real::Real;
use crate::tensor::Tensor;

/// (outer, axis, inner) sizes for reducing along `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

impl<T: Real> Tensor<T> {
    fn check_axis(&self, op: &'static str, axis: usize) -> Result<()> {
        if axis >= self.rank() {
            return Err(DiffError::arg(
                op,
                format!("axis {axis} out of range for shape {:?}", self.shape()),
            ));
        }
        Ok(())
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(&self) -> Result<Tensor<T>> {
        let s: T = self.values().iter().copied().sum();
        let ix = self.node_id();
        Tensor::from_op(Vec::new(), vec![s], &[self], move |g, sink| {
            if let Some(gx) = sink.slot(ix) {
                let g0 = g[0];
                accumulate(gx, |_| g0);
            }
        })
    }

    pub fn mean_all(&self) -> Result<Tensor<T>> {
        let n = self.numel().max(1) as f64;
        self.sum_all()?.scale(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        self.check_axis("sum_axis", axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.values();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &x[(o * len + a) * inner..(o * len + a + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
        }
        let ix = self.node_id();
        Tensor::from_op(reduced_shape(self.shape(), axis, keepdim), out, &[self], move |g, sink| {
            if let Some(gx) = sink.slot(ix) {
                for o in 0..outer {
                    for a in 0..len {
                        let dst = &mut gx[(o * len + a) * inner..(o * len + a + 1) * inner];
                        let src = &g[o * inner..(o + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    }
                }
            }
        })
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        self.check_axis("mean_axis", axis)?;
        let n = self.shape()[axis].max(1) as f64;
        self.sum_axis(axis, keepdim)?.scale(1.0 / n)
    }

    /// Maximum along `axis`. The gradient is routed to the arg-max only;
    /// ties go to the lowest index.
    pub fn max_axis(&self, axis: usize) -> Result<Tensor<T>> {
        self.check_axis("max_axis", axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        if len == 0 {
            return Err(DiffError::arg("max_axis", "cannot reduce an empty axis"));
        }
        let x = self.values();
        let mut out = vec![T::zero(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = x[o * len * inner + i];
                let mut bi = 0;
                for a in 1..len {
                    let v = x[(o * len + a) * inner + i];
                    if v > best {
                        best = v;
                        bi = a;
                    }
                }
                out[o * inner + i] = best;
                arg[o * inner + i] = (o * len + bi) * inner + i;
            }
        }
        let ix = self.node_id();
        Tensor::from_op(reduced_shape(self.shape(), axis, false), out, &[self], move |g, sink| {
            if let Some(gx) = sink.slot(ix) {
                for (k, &src) in arg.iter().enumerate() {
                    gx[src] += g[k];
                }
            }
        })
    }

    /// Index of the maximum along `axis` (lowest index on ties).
    pub fn argmax_axis(&self, axis: usize) -> Result<Vec<usize>> {
        self.check_axis("argmax_axis", axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.values();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = x[o * len * inner + i];
                let mut bi = 0;
                for a in 1..len {
                    let v = x[(o * len + a) * inner + i];
                    if v > best {
                        best = v;
                        bi = a;
                    }
                }
                out.push(bi);
            }
        }
        Ok(out)
    }

    /// Maximum over axis 0 of a `[A, M, ...]` tensor restricted to entries
    /// whose `mask[a * M + m]` is set. Rows with no active entry yield zero
    /// and receive no gradient. Ties go to the lowest index.
    pub fn max_axis0_masked(&self, mask: &[bool]) -> Result<Tensor<T>> {
        if self.rank() < 2 {
            return Err(DiffError::arg("max_axis0_masked", "needs rank >= 2"));
        }
        let (a_len, m_len) = (self.shape()[0], self.shape()[1]);
        if mask.len() != a_len * m_len {
            return Err(DiffError::shape(
                "max_axis0_masked",
                self.shape(),
                &[mask.len()],
            ));
        }
        let inner: usize = self.shape()[2..].iter().product();
        let x = self.values();
        let n_out = m_len * inner;
        let mut out = vec![T::zero(); n_out];
        let mut arg = vec![usize::MAX; n_out];
        for m in 0..m_len {
            for a in 0..a_len {
                if !mask[a * m_len + m] {
                    continue;
                }
                let src = &x[(a * m_len + m) * inner..(a * m_len + m + 1) * inner];
                for (f, &v) in src.iter().enumerate() {
                    let k = m * inner + f;
                    if arg[k] == usize::MAX || v > out[k] {
                        out[k] = v;
                        arg[k] = (a * m_len + m) * inner + f;
                    }
                }
            }
        }
        let ix = self.node_id();
        Tensor::from_op(self.shape()[1..].to_vec(), out, &[self], move |g, sink| {
            if let Some(gx) = sink.slot(ix) {
                for (k, &src) in arg.iter().enumerate() {
                    if src != usize::MAX {
                        gx[src] += g[k];
                    }
                }
            }
        })
    }

    /// Exclusive prefix sum along the last axis: `y[i] = sum_{j<i} x[j]`.
    pub fn cumsum_exclusive(&self) -> Result<Tensor<T>> {
        if self.rank() == 0 {
            return Err(DiffError::arg("cumsum_exclusive", "needs rank >= 1"));
        }
        let n = *self.shape().last().unwrap();
        let x = self.values();
        let mut out = vec![T::zero(); x.len()];
        if n > 0 {
            for (src, dst) in x.chunks(n).zip(out.chunks_mut(n)) {
                let mut acc = T::zero();
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = acc;
                    acc += s;
                }
            }
        }
        let ix = self.node_id();
        Tensor::from_op(self.shape().to_vec(), out, &[self], move |g, sink| {
            if let Some(gx) = sink.slot(ix) {
                if n == 0 {
                    return;
                }
                for (gs, dst) in g.chunks(n).zip(gx.chunks_mut(n)) {
                    // dx[j] = sum_{i>j} g[i]
                    let mut acc = T::zero();
                    for j in (0..n).rev() {
                        dst[j] += acc;
                        acc += gs[j];
                    }
                }
            }
        })
    }
}
