use rayon::prelude::*;

use crate::error::{DiffError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const GROUP_NORM_EPS: f64 = 1e-5;

impl<T: Real> Tensor<T> {
    /// Group normalisation of `[B, C, ...]` with per-channel affine `gamma`, `beta`.
    pub fn group_norm(&self, groups: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() < 2 {
            return Err(DiffError::arg("group_norm", "expects [B, C, ...]"));
        }
        let (b, c) = (self.shape()[0], self.shape()[1]);
        if groups == 0 || c % groups != 0 {
            return Err(DiffError::arg(
                "group_norm",
                format!("{c} channels do not split into {groups} groups"),
            ));
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(DiffError::shape("group_norm", self.shape(), gamma.shape()));
        }
        let spatial: usize = self.shape()[2..].iter().product();
        let cg = c / groups;
        let n = cg * spatial;
        let eps = T::lit(GROUP_NORM_EPS);
        let x = self.values();
        let (gm, bt) = (gamma.values(), beta.values());

        // normalised values and the inverse std of every (batch, group)
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); b * groups];
        xhat.par_chunks_mut(n)
            .zip(inv_std.par_iter_mut())
            .enumerate()
            .for_each(|(k, (dst, is))| {
                let src = &x[k * n..(k + 1) * n];
                let nt = T::lit(n as f64);
                let mean = src.iter().copied().sum::<T>() / nt;
                let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
                *is = T::one() / (var + eps).sqrt();
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = (v - mean) * *is;
                }
            });
        let mut out = vec![T::zero(); x.len()];
        for (k, (dst, src)) in out.chunks_mut(spatial.max(1)).zip(xhat.chunks(spatial.max(1))).enumerate() {
            let ch = k % c;
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v * gm[ch] + bt[ch];
            }
        }
        let gm = gamma.data_arc().clone();
        let (ix, ig, ib) = (self.node_id(), gamma.node_id(), beta.node_id());
        Tensor::from_op(self.shape().to_vec(), out, &[self, gamma, beta], move |g, sink| {
            let sp = spatial.max(1);
            if let Some(gg) = sink.slot(ig) {
                for (k, (gs, xs)) in g.chunks(sp).zip(xhat.chunks(sp)).enumerate() {
                    gg[k % c] += gs.iter().zip(xs).map(|(&a, &b)| a * b).sum::<T>();
                }
            }
            if let Some(gb) = sink.slot(ib) {
                for (k, gs) in g.chunks(sp).enumerate() {
                    gb[k % c] += gs.iter().copied().sum::<T>();
                }
            }
            if let Some(gx) = sink.slot(ix) {
                gx.par_chunks_mut(n).enumerate().for_each(|(k, dst)| {
                    let gs = &g[k * n..(k + 1) * n];
                    let xs = &xhat[k * n..(k + 1) * n];
                    let g0 = (k % groups) * cg;
                    let dxh = |i: usize| gs[i] * gm[g0 + i / sp];
                    let nt = T::lit(n as f64);
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for i in 0..n {
                        let d = dxh(i);
                        m1 += d;
                        m2 += d * xs[i];
                    }
                    m1 /= nt;
                    m2 /= nt;
                    let is = inv_std[k];
                    for i in 0..n {
                        dst[i] += is * (dxh(i) - m1 - xs[i] * m2);
                    }
                });
            }
        })
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Result<Tensor<T>> {
        if self.rank() == 0 {
            return Err(DiffError::arg("softmax_last", "needs rank >= 1"));
        }
        let n = *self.shape().last().unwrap();
        let x = self.values();
        let mut out = vec![T::zero(); x.len()];
        if n > 0 {
            for (src, dst) in x.chunks(n).zip(out.chunks_mut(n)) {
                let m = src.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = (v - m).exp();
                    s += *d;
                }
                dst.iter_mut().for_each(|d| *d /= s);
            }
        }
        let y = std::sync::Arc::new(out);
        let yc = y.clone();
        let ix = self.node_id();
        Tensor::from_op_shared(self.shape().to_vec(), y, &[self], move |g, sink| {
            if let Some(gx) = sink.slot(ix) {
                if n == 0 {
                    return;
                }
                for ((gs, ys), dst) in g.chunks(n).zip(yc.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: T = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum();
                    for i in 0..n {
                        dst[i] += ys[i] * (gs[i] - dot);
                    }
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::Tensor;

    #[test]
    fn group_norm_standardises_each_group() {
        let v: Vec<f64> = (0..16).map(|i| (i * i) as f64).collect();
        let x = Tensor::<f64>::from_f64(&[1, 4, 2, 2], &v).unwrap();
        let gamma = Tensor::<f64>::from_f64(&[4], &[1.0; 4]).unwrap();
        let beta = Tensor::<f64>::from_f64(&[4], &[0.0; 4]).unwrap();
        let y = x.group_norm(2, &gamma, &beta).unwrap();
        for grp in y.values().chunks(8) {
            let m: f64 = grp.iter().sum::<f64>() / 8.0;
            let var: f64 = grp.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 8.0;
            assert!(m.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
        assert!(x.group_norm(3, &gamma, &beta).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::<f64>::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 1000.0, 0.0, -1000.0]).unwrap();
        let y = x.softmax_last().unwrap();
        for row in y.values().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((y.values()[3] - 1.0).abs() < 1e-12);
    }
}
