use rayon::prelude::*;

use crate::error::{DiffError, Result};
use crate::kernels::{col2im, im2col};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Columns of one image; borrowed directly for pointwise kernels.
    fn columns<'a, T: Real>(&self, img: &'a [T], buf: &'a mut Vec<T>) -> &'a [T] {
        if self.pointwise() {
            return img;
        }
        buf.resize(self.ckk() * self.ho * self.wo, T::zero());
        im2col(
            img, self.c, self.h, self.w, self.kh, self.kw, self.stride, self.pad, self.ho,
            self.wo, buf,
        );
        buf
    }
}

/// Source taps along one axis for bilinear resizing with half-pixel centres.
fn linear_taps(out: usize, inp: usize) -> Vec<(usize, usize, f64)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(inp - 1);
            let i1 = (i0 + 1).min(inp - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl<T: Real> Tensor<T> {
    /// 2-D cross-correlation of `[B, C, H, W]` with `[O, C, kh, kw]` weights.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        if self.rank() != 4 || weight.rank() != 4 || weight.shape()[1] != self.shape()[1] {
            return Err(DiffError::shape("conv2d", self.shape(), weight.shape()));
        }
        if stride == 0 {
            return Err(DiffError::arg("conv2d", "stride must be positive"));
        }
        let [b, c, h, w] = [self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]];
        let [o, _, kh, kw] = [
            weight.shape()[0],
            weight.shape()[1],
            weight.shape()[2],
            weight.shape()[3],
        ];
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(DiffError::shape("conv2d", self.shape(), weight.shape()));
        }
        if let Some(bias) = bias {
            if bias.shape() != [o] {
                return Err(DiffError::shape("conv2d", weight.shape(), bias.shape()));
            }
        }
        let geo = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let (hw_in, hw_out) = (c * h * w, geo.ho * geo.wo);
        let x = self.data_arc().clone();
        let wt = weight.data_arc().clone();
        let mut out = vec![T::zero(); b * o * hw_out];
        out.par_chunks_mut(o * hw_out).enumerate().for_each(|(bi, dst)| {
            let mut buf = Vec::new();
            let cols = geo.columns(&x[bi * hw_in..(bi + 1) * hw_in], &mut buf);
            T::gemm(o, geo.ckk(), hw_out, &wt, false, cols, false, dst, T::zero());
        });
        if let Some(bias) = bias {
            let bv = bias.values();
            // chunks run over (batch, channel) in order
            for (k, chunk) in out.chunks_mut(hw_out).enumerate() {
                let bk = bv[k % o];
                chunk.iter_mut().for_each(|v| *v += bk);
            }
        }
        let (ix, iw, ib) = (self.node_id(), weight.node_id(), bias.and_then(|t| t.node_id()));
        let mut parents = vec![self, weight];
        if let Some(bias) = bias {
            parents.push(bias);
        }
        Tensor::from_op(vec![b, o, geo.ho, geo.wo], out, &parents, move |g, sink| {
            if let Some(gb) = sink.slot(ib) {
                for (k, chunk) in g.chunks(hw_out).enumerate() {
                    gb[k % o] += chunk.iter().copied().sum::<T>();
                }
            }
            if let Some(gw) = sink.slot(iw) {
                let partials: Vec<Vec<T>> = (0..b)
                    .into_par_iter()
                    .map(|bi| {
                        let mut buf = Vec::new();
                        let cols = geo.columns(&x[bi * hw_in..(bi + 1) * hw_in], &mut buf);
                        let mut p = vec![T::zero(); o * geo.ckk()];
                        T::gemm(
                            o,
                            hw_out,
                            geo.ckk(),
                            &g[bi * o * hw_out..],
                            false,
                            cols,
                            true,
                            &mut p,
                            T::zero(),
                        );
                        p
                    })
                    .collect();
                for p in partials {
                    gw.iter_mut().zip(&p).for_each(|(a, &v)| *a += v);
                }
            }
            if let Some(gx) = sink.slot(ix) {
                gx.par_chunks_mut(hw_in).enumerate().for_each(|(bi, dx)| {
                    let gsl = &g[bi * o * hw_out..(bi + 1) * o * hw_out];
                    if geo.pointwise() {
                        T::gemm(c, o, hw_out, &wt, true, gsl, false, dx, T::one());
                    } else {
                        let mut dcols = vec![T::zero(); geo.ckk() * hw_out];
                        T::gemm(geo.ckk(), o, hw_out, &wt, true, gsl, false, &mut dcols, T::zero());
                        col2im(
                            &dcols, c, h, w, geo.kh, geo.kw, geo.stride, geo.pad, geo.ho,
                            geo.wo, dx,
                        );
                    }
                });
            }
        })
    }

    /// Nearest-neighbour 2x upsampling of `[B, C, H, W]`.
    pub fn upsample_nearest2x(&self) -> Result<Tensor<T>> {
        if self.rank() != 4 {
            return Err(DiffError::arg("upsample_nearest2x", "expects [B, C, H, W]"));
        }
        let [b, c, h, w] = [self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]];
        let (h2, w2) = (2 * h, 2 * w);
        let x = self.values();
        let mut out = vec![T::zero(); b * c * h2 * w2];
        for (plane, dst) in out.chunks_mut(h2 * w2).enumerate() {
            let src = &x[plane * h * w..(plane + 1) * h * w];
            for y in 0..h2 {
                for xx in 0..w2 {
                    dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let ix = self.node_id();
        Tensor::from_op(vec![b, c, h2, w2], out, &[self], move |g, sink| {
            if let Some(gx) = sink.slot(ix) {
                for (plane, src) in g.chunks(h2 * w2).enumerate() {
                    let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
                        }
                    }
                }
            }
        })
    }

    /// Bilinear resize of `[B, C, H, W]` to `[B, C, oh, ow]` with half-pixel
    /// centres and edge clamping.
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Result<Tensor<T>> {
        if self.rank() != 4 || oh == 0 || ow == 0 || self.shape()[2] == 0 || self.shape()[3] == 0 {
            return Err(DiffError::arg("resize_bilinear", "expects non-empty [B, C, H, W]"));
        }
        let [b, c, h, w] = [self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]];
        let ty = linear_taps(oh, h);
        let tx = linear_taps(ow, w);
        let x = self.values();
        let mut out = vec![T::zero(); b * c * oh * ow];
        for (plane, dst) in out.chunks_mut(oh * ow).enumerate() {
            let src = &x[plane * h * w..(plane + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let (fy, fx) = (T::lit(fy), T::lit(fx));
                    let one = T::one();
                    dst[oy * ow + ox] = (one - fy) * ((one - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1])
                        + fy * ((one - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1]);
                }
            }
        }
        let ix = self.node_id();
        Tensor::from_op(vec![b, c, oh, ow], out, &[self], move |g, sink| {
            if let Some(gx) = sink.slot(ix) {
                for (plane, src) in g.chunks(oh * ow).enumerate() {
                    let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let gv = src[oy * ow + ox];
                            let (fy, fx) = (T::lit(fy), T::lit(fx));
                            let one = T::one();
                            dst[y0 * w + x0] += gv * (one - fy) * (one - fx);
                            dst[y0 * w + x1] += gv * (one - fy) * fx;
                            dst[y1 * w + x0] += gv * fy * (one - fx);
                            dst[y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::{Graph, Tensor};

    /// Direct nested-loop convolution used as a reference.
    fn naive(
        x: &[f64],
        [b, c, h, w]: [usize; 4],
        wt: &[f64],
        [o, kh, kw]: [usize; 3],
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; b * o * ho * wo];
        for bi in 0..b {
            for oi in 0..o {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut s = 0.0;
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (xx * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    s += x[((bi * c + ci) * h + iy as usize) * w + ix as usize]
                                        * wt[((oi * c + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((bi * o + oi) * ho + y) * wo + xx] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let xs: Vec<f64> = (0..2 * 3 * 5 * 4).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let ws: Vec<f64> = (0..4 * 3 * 3 * 3).map(|i| ((i * 5) % 7) as f64 - 3.0).collect();
        let x = Tensor::<f64>::from_f64(&[2, 3, 5, 4], &xs).unwrap();
        let w = Tensor::<f64>::from_f64(&[4, 3, 3, 3], &ws).unwrap();
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let y = x.conv2d(&w, None, stride, pad).unwrap();
            let r = naive(&xs, [2, 3, 5, 4], &ws, [4, 3, 3], stride, pad);
            assert_eq!(y.to_f64_vec(), r, "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn pointwise_conv_bias_gradient() {
        let g = Graph::<f64>::new();
        let x = g.leaf(&[1, 2, 2, 2], vec![1.0; 8]).unwrap();
        let w = g.leaf(&[3, 2, 1, 1], vec![1.0; 6]).unwrap();
        let b = g.leaf(&[3], vec![0.5, 0.0, -0.5]).unwrap();
        let y = x.conv2d(&w, Some(&b), 1, 0).unwrap();
        assert_eq!(y.values()[0], 2.5);
        g.backward(&y.sum_all().unwrap()).unwrap();
        assert_eq!(b.grad().unwrap(), vec![4.0, 4.0, 4.0]);
        assert_eq!(x.grad().unwrap(), vec![3.0; 8]);
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let v: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let x = Tensor::<f64>::from_f64(&[1, 1, 3, 4], &v).unwrap();
        assert_eq!(x.resize_bilinear(3, 4).unwrap().to_f64_vec(), v);
        let c = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[2.0; 4]).unwrap();
        let up = c.resize_bilinear(5, 3).unwrap();
        assert!(up.values().iter().all(|&a| (a - 2.0).abs() < 1e-12));
    }

    #[test]
    fn bilinear_half_pixel_downsample() {
        // 4 -> 2 averages neighbouring pairs
        let x = Tensor::<f64>::from_f64(&[1, 1, 1, 4], &[0.0, 2.0, 4.0, 6.0]).unwrap();
        let y = x.resize_bilinear(1, 2).unwrap();
        assert_eq!(y.to_f64_vec(), vec![1.0, 5.0]);
    }

    #[test]
    fn nearest_upsample_repeats() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 1, 2], &[1.0, 2.0]).unwrap();
        let y = x.upsample_nearest2x().unwrap();
        assert_eq!(y.to_f64_vec(), vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }
}
