use crate::error::{DiffError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Boundary handling for [`Tensor::sample_bilinear`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Out-of-range taps are clamped to the border texels.
    Clamp,
    /// The x axis wraps around (azimuth); y is clamped.
    WrapX,
}

/// The four taps and weights of one bilinear lookup.
fn taps(u: f64, v: f64, w: usize, h: usize, mode: SampleMode) -> [(usize, f64); 4] {
    let px = u * w as f64 - 0.5;
    let py = v * h as f64 - 0.5;
    let (x0f, y0f) = (px.floor(), py.floor());
    let (fx, fy) = (px - x0f, py - y0f);
    let clamp = |i: f64, n: usize| i.max(0.0).min(n as f64 - 1.0) as usize;
    let (x0, x1) = match mode {
        SampleMode::Clamp => (clamp(x0f, w), clamp(x0f + 1.0, w)),
        SampleMode::WrapX => {
            let wf = w as f64;
            let a = x0f.rem_euclid(wf) as usize % w;
            (a, (a + 1) % w)
        }
    };
    let (y0, y1) = (clamp(y0f, h), clamp(y0f + 1.0, h));
    [
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ]
}

impl<T: Real> Tensor<T> {
    /// Bilinear lookups into a stack of feature planes `[V, C, H, W]`.
    ///
    /// `coords` holds `V * N` normalised `(u, v)` positions in `[0, 1]`,
    /// grouped by plane; texel `i` is centred at `(i + 0.5) / size`.
    /// Entries whose `valid` flag is unset produce zeros. Returns `[V, N, C]`.
    /// Gradients flow to the planes only.
    pub fn sample_bilinear(
        &self,
        coords: &[[f64; 2]],
        valid: &[bool],
        mode: SampleMode,
    ) -> Result<Tensor<T>> {
        if self.rank() != 4 {
            return Err(DiffError::arg("sample_bilinear", "planes must be [V, C, H, W]"));
        }
        let [nv, c, h, w] = [self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]];
        if h == 0 || w == 0 || nv == 0 {
            return Err(DiffError::arg("sample_bilinear", "empty planes"));
        }
        if coords.len() % nv != 0 || valid.len() != coords.len() {
            return Err(DiffError::shape(
                "sample_bilinear",
                &[coords.len(), valid.len()],
                self.shape(),
            ));
        }
        let n = coords.len() / nv;
        let hw = h * w;
        let x = self.values();
        let mut out = vec![T::zero(); nv * n * c];
        let mut table: Vec<Option<[(usize, f64); 4]>> = Vec::with_capacity(coords.len());
        for (k, (uv, &ok)) in coords.iter().zip(valid).enumerate() {
            if !ok || !uv[0].is_finite() || !uv[1].is_finite() {
                table.push(None);
                continue;
            }
            let tp = taps(uv[0], uv[1], w, h, mode);
            let view = k / n;
            let dst = &mut out[k * c..(k + 1) * c];
            for (ch, d) in dst.iter_mut().enumerate() {
                let base = (view * c + ch) * hw;
                let mut s = T::zero();
                for &(off, wt) in &tp {
                    s += T::lit(wt) * x[base + off];
                }
                *d = s;
            }
            table.push(Some(tp));
        }
        let ix = self.node_id();
        Tensor::from_op(vec![nv, n, c], out, &[self], move |g, sink| {
            if let Some(gx) = sink.slot(ix) {
                for (k, tp) in table.iter().enumerate() {
                    let Some(tp) = tp else { continue };
                    let view = k / n;
                    for ch in 0..c {
                        let gv = g[k * c + ch];
                        let base = (view * c + ch) * hw;
                        for &(off, wt) in tp {
                            gx[base + off] += T::lit(wt) * gv;
                        }
                    }
                }
            }
        })
    }
}
