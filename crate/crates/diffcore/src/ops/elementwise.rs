use crate::error::{DiffError, Result};
use crate::kernels::{
    accumulate, aligned_strides, broadcast_shape, for_each_broadcast, map_into, zip_map,
};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        }
    }

    #[inline(always)]
    fn apply<T: Real>(self, a: T, b: T) -> T {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }

    /// (d out / d a, d out / d b)
    #[inline(always)]
    fn partials<T: Real>(self, a: T, b: T) -> (T, T) {
        match self {
            BinOp::Add => (T::one(), T::one()),
            BinOp::Sub => (T::one(), -T::one()),
            BinOp::Mul => (b, a),
            BinOp::Div => (T::one() / b, -a / (b * b)),
        }
    }
}

/// How an operand of shape `s` covers a broadcast output viewed as
/// `[rows, cols]`: `(row stride, col stride)`.
fn block_strides(s: &[usize], out: &[usize]) -> Option<(usize, Option<usize>)> {
    // (split, is_tile): s == [1.., out[split..]] tiles, s == [out[..split], 1..] repeats
    let rank = out.len();
    let mut al = vec![1; rank - s.len()];
    al.extend_from_slice(s);
    if al == out {
        return Some((0, None));
    }
    let lead = al.iter().take_while(|&&d| d == 1).count();
    if al[lead..] == out[lead..] {
        return Some((lead, Some(1)));
    }
    let trail = al.iter().rev().take_while(|&&d| d == 1).count();
    if al[..rank - trail] == out[..rank - trail] {
        return Some((rank - trail, Some(0)));
    }
    None
}

/// Two-operand broadcast where one side is full and the other either
/// repeats along the trailing axes or tiles along the leading ones.
struct Blocks {
    rows: usize,
    cols: usize,
    sa: (usize, usize),
    sb: (usize, usize),
}

impl Blocks {
    fn new(a: &[usize], b: &[usize], out: &[usize]) -> Option<Self> {
        let (split_a, ka) = block_strides(a, out)?;
        let (split_b, kb) = block_strides(b, out)?;
        let (split, kind, a_full) = match (ka, kb) {
            (None, Some(k)) => (split_b, k, true),
            (Some(k), None) => (split_a, k, false),
            _ => return None,
        };
        let rows: usize = out[..split].iter().product();
        let cols: usize = out[split..].iter().product();
        let full = (cols, 1);
        // kind 1: index is the column; kind 0: index is the row
        let part = if kind == 1 { (0, 1) } else { (1, 0) };
        let (sa, sb) = if a_full { (full, part) } else { (part, full) };
        Some(Blocks { rows, cols, sa, sb })
    }

    #[inline(always)]
    fn a(&self, r: usize, c: usize) -> usize {
        r * self.sa.0 + c * self.sa.1
    }

    #[inline(always)]
    fn b(&self, r: usize, c: usize) -> usize {
        r * self.sb.0 + c * self.sb.1
    }
}

fn binary<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: BinOp) -> Result<Tensor<T>> {
    let out_shape = broadcast_shape(a.shape(), b.shape())
        .ok_or_else(|| DiffError::shape(op.name(), a.shape(), b.shape()))?;
    let (av, bv) = (a.values(), b.values());
    let data = if a.shape() == b.shape() {
        zip_map(av, bv, move |x, y| op.apply(x, y))
    } else if b.numel() == 1 && out_shape == a.shape() {
        let y = bv[0];
        map_into(av, move |x| op.apply(x, y))
    } else if a.numel() == 1 && out_shape == b.shape() {
        let x = av[0];
        map_into(bv, move |y| op.apply(x, y))
    } else if let Some(blk) = Blocks::new(a.shape(), b.shape(), &out_shape) {
        let mut out = Vec::with_capacity(blk.rows * blk.cols);
        for r in 0..blk.rows {
            for c in 0..blk.cols {
                out.push(op.apply(av[blk.a(r, c)], bv[blk.b(r, c)]));
            }
        }
        out
    } else {
        let sa = aligned_strides(a.shape(), &out_shape);
        let sb = aligned_strides(b.shape(), &out_shape);
        let mut out = vec![T::zero(); out_shape.iter().product()];
        for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = op.apply(av[ia], bv[ib]));
        out
    };
    let (ia, ib) = (a.node_id(), b.node_id());
    let (ad, bd) = (a.data_arc().clone(), b.data_arc().clone());
    let (sa_shape, sb_shape) = (a.shape().to_vec(), b.shape().to_vec());
    let oshape = out_shape.clone();
    Tensor::from_op(out_shape, data, &[a, b], move |g, sink| {
        let same = sa_shape == sb_shape;
        let blk = Blocks::new(&sa_shape, &sb_shape, &oshape);
        if let Some(ga) = sink.slot(ia) {
            if same {
                accumulate(ga, |i| g[i] * op.partials(ad[i], bd[i]).0);
            } else if let Some(blk) = &blk {
                for r in 0..blk.rows {
                    for c in 0..blk.cols {
                        let (x, y) = (blk.a(r, c), blk.b(r, c));
                        ga[x] += g[r * blk.cols + c] * op.partials(ad[x], bd[y]).0;
                    }
                }
            } else {
                let sa = aligned_strides(&sa_shape, &oshape);
                let sb = aligned_strides(&sb_shape, &oshape);
                for_each_broadcast(&oshape, &sa, &sb, |o, x, y| {
                    ga[x] += g[o] * op.partials(ad[x], bd[y]).0
                });
            }
        }
        if let Some(gb) = sink.slot(ib) {
            if same {
                accumulate(gb, |i| g[i] * op.partials(ad[i], bd[i]).1);
            } else if let Some(blk) = &blk {
                for r in 0..blk.rows {
                    for c in 0..blk.cols {
                        let (x, y) = (blk.a(r, c), blk.b(r, c));
                        gb[y] += g[r * blk.cols + c] * op.partials(ad[x], bd[y]).1;
                    }
                }
            } else {
                let sa = aligned_strides(&sa_shape, &oshape);
                let sb = aligned_strides(&sb_shape, &oshape);
                for_each_broadcast(&oshape, &sa, &sb, |o, x, y| {
                    gb[y] += g[o] * op.partials(ad[x], bd[y]).1
                });
            }
        }
    })
}

impl<T: Real> Tensor<T> {
    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, rhs, BinOp::Add)
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, rhs, BinOp::Sub)
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, rhs, BinOp::Mul)
    }

    pub fn div(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, rhs, BinOp::Div)
    }

    /// Applies `f` elementwise; `df(x, y)` is the derivative at input `x`
    /// with output `y = f(x)`.
    pub(crate) fn unary(
        &self,
        f: impl Fn(T) -> T + Sync + Send,
        df: impl Fn(T, T) -> T + Sync + Send + 'static,
    ) -> Result<Tensor<T>> {
        let data = map_into(self.values(), f);
        let out = std::sync::Arc::new(data);
        let y = out.clone();
        let x = self.data_arc().clone();
        let ix = self.node_id();
        Tensor::from_op_shared(self.shape().to_vec(), out, &[self], move |g, sink| {
            if let Some(gx) = sink.slot(ix) {
                accumulate(gx, |i| g[i] * df(x[i], y[i]));
            }
        })
    }

    pub fn neg(&self) -> Result<Tensor<T>> {
        self.unary(|x| -x, |_, _| -T::one())
    }

    /// Multiplies by a constant.
    pub fn scale(&self, c: f64) -> Result<Tensor<T>> {
        let c = T::lit(c);
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor<T>> {
        let c = T::lit(c);
        self.unary(move |x| x + c, |_, _| T::one())
    }

    pub fn exp(&self) -> Result<Tensor<T>> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn log(&self) -> Result<Tensor<T>> {
        self.unary(|x| x.ln(), |x, _| T::one() / x)
    }

    pub fn sqrt(&self) -> Result<Tensor<T>> {
        self.unary(|x| x.sqrt(), |_, y| T::lit(0.5) / y)
    }

    pub fn square(&self) -> Result<Tensor<T>> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(&self) -> Result<Tensor<T>> {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn tanh(&self) -> Result<Tensor<T>> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(&self) -> Result<Tensor<T>> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn relu(&self) -> Result<Tensor<T>> {
        self.unary(
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Result<Tensor<T>> {
        self.unary(
            |x| x * sigmoid(x),
            |x, y| {
                // y / x recovers sigmoid(x) without another exp
                let s = if x.abs() > T::lit(1e-20) { y / x } else { sigmoid(x) };
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Tensor<T>> {
        let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
        let c = T::lit(0.044715);
        let half = T::lit(0.5);
        self.unary(
            move |x| half * x * (T::one() + (k * (x + c * x * x * x)).tanh()),
            move |x, _| {
                let u = k * (x + c * x * x * x);
                let th = u.tanh();
                let du = k * (T::one() + T::lit(3.0) * c * x * x);
                half * (T::one() + th) + half * x * (T::one() - th * th) * du
            },
        )
    }

    /// `x` for `x > 0`, `exp(x) - 1` otherwise.
    pub fn elu(&self) -> Result<Tensor<T>> {
        self.unary(
            |x| if x > T::zero() { x } else { x.exp() - T::one() },
            |x, y| if x > T::zero() { T::one() } else { y + T::one() },
        )
    }

    /// `ln(1 + exp(x))`, evaluated stably.
    pub fn softplus(&self) -> Result<Tensor<T>> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    /// `max(x, c)`; gradient flows only where `x > c`.
    pub fn clamp_min(&self, c: f64) -> Result<Tensor<T>> {
        let c = T::lit(c);
        self.unary(
            move |x| if x > c { x } else { c },
            move |x, _| if x > c { T::one() } else { T::zero() },
        )
    }

    /// Picks `a` where `mask` is set and `b` elsewhere.
    pub fn select(mask: &[bool], a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(DiffError::shape("select", a.shape(), b.shape()));
        }
        if mask.len() != a.numel() {
            return Err(DiffError::shape("select", &[mask.len()], a.shape()));
        }
        let (av, bv) = (a.values(), b.values());
        let data: Vec<T> = mask
            .iter()
            .enumerate()
            .map(|(i, &m)| if m { av[i] } else { bv[i] })
            .collect();
        let mask = mask.to_vec();
        let (ia, ib) = (a.node_id(), b.node_id());
        Tensor::from_op(a.shape().to_vec(), data, &[a, b], move |g, sink| {
            if let Some(ga) = sink.slot(ia) {
                for (i, &m) in mask.iter().enumerate() {
                    if m {
                        ga[i] += g[i];
                    }
                }
            }
            if let Some(gb) = sink.slot(ib) {
                for (i, &m) in mask.iter().enumerate() {
                    if !m {
                        gb[i] += g[i];
                    }
                }
            }
        })
    }
}

#[inline(always)]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline(always)]
pub(crate) fn softplus<T: Real>(x: T) -> T {
    if x > T::lit(30.0) {
        x
    } else {
        x.max(T::zero()) + (-x.abs()).exp().ln_1p()
    }
}
