use crate::error::{DiffError, Result};
use crate::kernels::{contiguous_strides, reduce_to};
use crate::real::Real;
use crate::tensor::Tensor;

impl<T: Real> Tensor<T> {
    /// Same data under a new shape. No copy is made.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(DiffError::shape("reshape", self.shape(), shape));
        }
        let ix = self.node_id();
        Tensor::from_op_shared(
            shape.to_vec(),
            self.data_arc().clone(),
            &[self],
            move |g, sink| {
                if let Some(gx) = sink.slot(ix) {
                    gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
            },
        )
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(DiffError::arg(
                "permute",
                format!("{perm:?} is not a permutation of {rank} axes"),
            ));
        }
        let in_strides = contiguous_strides(self.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let map = gather_map(&out_shape, &src_strides);
        let x = self.values();
        let data: Vec<T> = map.iter().map(|&s| x[s]).collect();
        let ix = self.node_id();
        Tensor::from_op(out_shape, data, &[self], move |g, sink| {
            if let Some(gx) = sink.slot(ix) {
                for (o, &s) in map.iter().enumerate() {
                    gx[s] += g[o];
                }
            }
        })
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor<T>> {
        let r = self.rank();
        if r < 2 {
            return Err(DiffError::arg("transpose_last", "needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// Concatenates tensors along `axis`.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| DiffError::arg("concat", "no inputs"))?;
        if axis >= first.rank() {
            return Err(DiffError::arg("concat", format!("axis {axis} out of range")));
        }
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(DiffError::shape("concat", first.shape(), p.shape()));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total_w: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total_w);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.values()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let ids: Vec<Option<usize>> = parts.iter().map(|p| p.node_id()).collect();
        Tensor::from_op(shape, data, parts, move |g, sink| {
            let mut off = 0;
            for (id, &w) in ids.iter().zip(&widths) {
                if let Some(gp) = sink.slot(*id) {
                    for o in 0..outer {
                        let src = &g[o * total_w + off..o * total_w + off + w];
                        gp[o * w..(o + 1) * w]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, &b)| *a += b);
                    }
                }
                off += w;
            }
        })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| DiffError::arg("stack", "no inputs"))?;
        let mut shape = vec![1];
        shape.extend_from_slice(first.shape());
        let lifted = parts
            .iter()
            .map(|p| {
                if p.shape() != first.shape() {
                    return Err(DiffError::shape("stack", first.shape(), p.shape()));
                }
                p.reshape(&shape)
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<T>> = lifted.iter().collect();
        Tensor::concat(&refs, 0)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() || start > end || end > self.shape()[axis] {
            return Err(DiffError::arg(
                "slice",
                format!("{start}..{end} on axis {axis} of {:?}", self.shape()),
            ));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let len = self.shape()[axis];
        let w = (end - start) * inner;
        let x = self.values();
        let mut data = Vec::with_capacity(outer * w);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            data.extend_from_slice(&x[base..base + w]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = end - start;
        let ix = self.node_id();
        Tensor::from_op(shape, data, &[self], move |g, sink| {
            if let Some(gx) = sink.slot(ix) {
                for o in 0..outer {
                    let base = (o * len + start) * inner;
                    gx[base..base + w]
                        .iter_mut()
                        .zip(&g[o * w..(o + 1) * w])
                        .for_each(|(a, &b)| *a += b);
                }
            }
        })
    }

    /// Rows of axis 0 picked by `index` (repeats allowed).
    pub fn gather_rows(&self, index: &[usize]) -> Result<Tensor<T>> {
        if self.rank() == 0 {
            return Err(DiffError::arg("gather_rows", "needs rank >= 1"));
        }
        let rows = self.shape()[0];
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(DiffError::arg(
                "gather_rows",
                format!("index {bad} out of range for {rows} rows"),
            ));
        }
        let inner: usize = self.shape()[1..].iter().product();
        let x = self.values();
        let mut data = Vec::with_capacity(index.len() * inner);
        for &i in index {
            data.extend_from_slice(&x[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = index.len();
        let index = index.to_vec();
        let ix = self.node_id();
        Tensor::from_op(shape, data, &[self], move |g, sink| {
            if let Some(gx) = sink.slot(ix) {
                for (k, &i) in index.iter().enumerate() {
                    gx[i * inner..(i + 1) * inner]
                        .iter_mut()
                        .zip(&g[k * inner..(k + 1) * inner])
                        .for_each(|(a, &b)| *a += b);
                }
            }
        })
    }

    /// Expands to `shape` under broadcasting rules.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let ok = self.rank() <= shape.len()
            && self
                .shape()
                .iter()
                .rev()
                .zip(shape.iter().rev())
                .all(|(&a, &b)| a == b || a == 1);
        if !ok {
            return Err(DiffError::shape("broadcast_to", self.shape(), shape));
        }
        let st = crate::kernels::aligned_strides(self.shape(), shape);
        let map = gather_map(shape, &st);
        let x = self.values();
        let data: Vec<T> = map.iter().map(|&s| x[s]).collect();
        let src_shape = self.shape().to_vec();
        let out_shape = shape.to_vec();
        let ix = self.node_id();
        Tensor::from_op(shape.to_vec(), data, &[self], move |g, sink| {
            if let Some(gx) = sink.slot(ix) {
                reduce_to(g, &out_shape, &src_shape, gx);
            }
        })
    }
}

/// Source offset of every output element, for a strided view of `shape`.
fn gather_map(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let total: usize = shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let zeros = vec![0; shape.len()];
    crate::kernels::for_each_broadcast(shape, strides, &zeros, |_, s, _| map.push(s));
    map
}
