//! Parameter initialisation and the small layers built on it.

use gibr_diffcore::{BoundParams, ParamStore, Real, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

fn insert<T: Real>(ps: &mut ParamStore<T>, name: String, shape: &[usize], v: Vec<f64>) -> Result<()> {
    ps.insert(name, shape, v.into_iter().map(T::lit).collect())?;
    Ok(())
}

/// `name.w: [fan_in, fan_out]`, `name.b: [fan_out]`, uniform in `±1/sqrt(fan_in)`.
pub fn init_linear<T: Real>(
    ps: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    insert(ps, format!("{name}.w"), &[fan_in, fan_out], uniform(rng, fan_in * fan_out, bound))?;
    insert(ps, format!("{name}.b"), &[fan_out], uniform(rng, fan_out, bound))
}

/// Linear layer scaled by `gain`; small gains keep freshly added residual
/// branches close to identity.
pub fn init_linear_scaled<T: Real>(
    ps: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
) -> Result<()> {
    let bound = gain / (fan_in as f64).sqrt();
    insert(ps, format!("{name}.w"), &[fan_in, fan_out], uniform(rng, fan_in * fan_out, bound))?;
    insert(ps, format!("{name}.b"), &[fan_out], vec![0.0; fan_out])
}

/// `name.w: [out, in, k, k]`, `name.b: [out]`.
pub fn init_conv<T: Real>(
    ps: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    gain: f64,
) -> Result<()> {
    let fan_in = c_in * k * k;
    let bound = gain / (fan_in as f64).sqrt();
    insert(ps, format!("{name}.w"), &[c_out, c_in, k, k], uniform(rng, c_out * fan_in, bound))?;
    insert(ps, format!("{name}.b"), &[c_out], vec![0.0; c_out])
}

/// Group-norm affine parameters, `name.g` ones and `name.b` zeros.
pub fn init_norm<T: Real>(ps: &mut ParamStore<T>, name: &str, c: usize) -> Result<()> {
    insert(ps, format!("{name}.g"), &[c], vec![1.0; c])?;
    insert(ps, format!("{name}.b"), &[c], vec![0.0; c])
}

pub fn linear<T: Real>(p: &BoundParams<T>, name: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    Ok(x.linear(w, Some(b))?)
}

pub fn conv<T: Real>(
    p: &BoundParams<T>,
    name: &str,
    x: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    Ok(x.conv2d(w, Some(b), stride, pad)?)
}

pub fn group_norm<T: Real>(
    p: &BoundParams<T>,
    name: &str,
    x: &Tensor<T>,
    groups: usize,
) -> Result<Tensor<T>> {
    let g = p.get(&format!("{name}.g"))?;
    let b = p.get(&format!("{name}.b"))?;
    Ok(x.group_norm(groups, g, b)?)
}

/// Two linear layers with SiLU in between.
pub fn mlp2<T: Real>(p: &BoundParams<T>, name: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
    let h = linear(p, &format!("{name}.0"), x)?.silu()?;
    linear(p, &format!("{name}.1"), &h)
}

pub fn init_mlp2<T: Real>(
    ps: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    dims: [usize; 3],
) -> Result<()> {
    init_linear(ps, rng, &format!("{name}.0"), dims[0], dims[1])?;
    init_linear(ps, rng, &format!("{name}.1"), dims[1], dims[2])
}
