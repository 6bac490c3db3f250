//! Setwise multi-view U-Net mapping noisy views, timesteps and poses to
//! pixel-aligned feature planes.
//!
//! Views travel through the network as the batch axis. They interact in
//! exactly two places: the linear attention layers, which attend over the
//! tokens of every view at once, and the pose embedding, which pools the
//! embeddings of the other views. Both are symmetric in the view order, so
//! the encoder is view-permutation equivariant.

use gibr_diffcore::{BoundParams, ParamStore, Real, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{pose_flatten, CameraPose};
use crate::nn;

pub const TIME_FREQS: usize = 16;
const POSE_WIDTH: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub base: usize,
    /// Channel multiplier of every resolution level, finest first.
    pub mults: Vec<usize>,
    /// Levels (indices into `mults`) that get attention after their block.
    pub attn_levels: Vec<usize>,
    pub blocks_per_level: usize,
    pub heads: usize,
    pub groups: usize,
    pub channels: usize,
    pub polar_channels: usize,
    /// Width of the timestep embedding.
    pub time_dim: usize,
    /// Size of the class table; 0 disables class conditioning.
    pub classes: usize,
    /// Attend across views; off gives per-view attention.
    pub cross_view: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            base: 32,
            mults: vec![1, 2, 4],
            attn_levels: vec![1, 2],
            blocks_per_level: 1,
            heads: 4,
            groups: 8,
            channels: crate::ibplanes::FEATURE_CHANNELS,
            polar_channels: crate::ibplanes::POLAR_CHANNELS,
            time_dim: 128,
            classes: 0,
            cross_view: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::arg("encoder config", msg));
        if self.mults.len() < 2 {
            return bad(format!("need at least 2 levels, got {}", self.mults.len()));
        }
        if self.base == 0 || self.blocks_per_level == 0 || self.heads == 0 || self.groups == 0 {
            return bad("base, blocks_per_level, heads and groups must be positive".into());
        }
        for &m in &self.mults {
            let c = self.base * m;
            if m == 0 || c % self.groups != 0 || c % self.heads != 0 {
                return bad(format!("width {c} must split into {} groups and {} heads", self.groups, self.heads));
            }
        }
        if let Some(&l) = self.attn_levels.iter().find(|&&l| l >= self.mults.len()) {
            return bad(format!("attention level {l} out of range"));
        }
        if self.channels == 0 || self.polar_channels == 0 || self.time_dim == 0 {
            return bad("output and embedding widths must be positive".into());
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base * self.mults[level]
    }

    pub fn cond_dim(&self) -> usize {
        self.time_dim + 4 * POSE_WIDTH
    }

    /// Images must halve cleanly at every downsampling.
    pub fn check_resolution(&self, h: usize, w: usize) -> Result<()> {
        let f = 1 << (self.mults.len() - 1);
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 || h % 2 != 0 {
            return Err(Error::arg(
                "encoder",
                format!("image size {w}x{h} must be a positive multiple of {f}"),
            ));
        }
        Ok(())
    }
}

/// What the last layer of the U-Net produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Feature planes and polar planes.
    Planes,
    /// Images directly, in `[-1, 1]`.
    Rgb,
}

/// Per-view conditioning.
#[derive(Debug, Clone)]
pub struct ViewConditioning {
    /// `0` marks a clean conditioning view.
    pub timesteps: Vec<f64>,
    /// Relative to view 0.
    pub poses: Vec<CameraPose>,
    /// Ignored when the encoder has no class table.
    pub class: Option<usize>,
}

pub struct EncoderOutput<T: Real> {
    /// `[V, C, H, W]`, or `[V, 3, H, W]` for the RGB head.
    pub planes: Tensor<T>,
    /// `[V, C', H/2, H]`; absent for the RGB head.
    pub polar: Option<Tensor<T>>,
}

fn init_block<T: Real>(
    ps: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    c_in: usize,
    c_out: usize,
    cond: usize,
) -> Result<()> {
    nn::init_norm(ps, &format!("{name}.n1"), c_in)?;
    nn::init_conv(ps, rng, &format!("{name}.c1"), c_in, c_out, 3, 1.0)?;
    nn::init_linear_scaled(ps, rng, &format!("{name}.cond"), cond, c_out, 1.0)?;
    nn::init_norm(ps, &format!("{name}.n2"), c_out)?;
    nn::init_conv(ps, rng, &format!("{name}.c2"), c_out, c_out, 3, 0.1)?;
    if c_in != c_out {
        nn::init_conv(ps, rng, &format!("{name}.skip"), c_in, c_out, 1, 1.0)?;
    }
    Ok(())
}

fn init_attn<T: Real>(ps: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, c: usize) -> Result<()> {
    nn::init_norm(ps, &format!("{name}.n"), c)?;
    for p in ["q", "k", "v"] {
        nn::init_linear(ps, rng, &format!("{name}.{p}"), c, c)?;
    }
    nn::init_linear_scaled(ps, rng, &format!("{name}.o"), c, c, 0.1)
}

/// Block names in forward order, with input and output widths.
struct Plan {
    down: Vec<(String, usize, usize, bool)>,
    up: Vec<(String, usize, usize, bool)>,
}

fn plan(cfg: &EncoderConfig) -> Plan {
    let levels = cfg.mults.len();
    let mut down = Vec::new();
    let mut c = cfg.base;
    for l in 0..levels {
        for b in 0..cfg.blocks_per_level {
            let out = cfg.width(l);
            down.push((format!("enc.down.{l}.{b}"), c, out, cfg.attn_levels.contains(&l)));
            c = out;
        }
    }
    let mut up = Vec::new();
    for l in (0..levels).rev() {
        for b in 0..cfg.blocks_per_level {
            let skip = down[l * cfg.blocks_per_level + cfg.blocks_per_level - 1 - b].2;
            let out = cfg.width(l);
            up.push((format!("enc.up.{l}.{b}"), c + skip, out, cfg.attn_levels.contains(&l)));
            c = out;
        }
    }
    Plan { down, up }
}

/// Adds every `enc.*` parameter for `cfg` and `head`.
pub fn init_params<T: Real>(ps: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &EncoderConfig, head: Head) -> Result<()> {
    cfg.validate()?;
    let cond = cfg.cond_dim();
    let td = cfg.time_dim;
    nn::init_mlp2(ps, rng, "enc.time", [2 * TIME_FREQS, td, td])?;
    if cfg.classes > 0 {
        ps.insert("enc.class", &[cfg.classes, td], vec![T::zero(); cfg.classes * td])?;
    }
    nn::init_mlp2(ps, rng, "enc.pose.ext", [16, POSE_WIDTH, POSE_WIDTH])?;
    nn::init_mlp2(ps, rng, "enc.pose.int", [9, POSE_WIDTH, POSE_WIDTH])?;
    nn::init_conv(ps, rng, "enc.in", 3, cfg.base, 3, 1.0)?;
    let p = plan(cfg);
    for (l, (name, ci, co, attn)) in p.down.iter().enumerate() {
        init_block(ps, rng, name, *ci, *co, cond)?;
        if *attn {
            init_attn(ps, rng, &format!("{name}.attn"), *co)?;
        }
        let level = l / cfg.blocks_per_level;
        if (l + 1) % cfg.blocks_per_level == 0 && level + 1 < cfg.mults.len() {
            nn::init_conv(ps, rng, &format!("enc.downsample.{level}"), *co, *co, 3, 1.0)?;
        }
    }
    let top = cfg.width(cfg.mults.len() - 1);
    init_block(ps, rng, "enc.mid.0", top, top, cond)?;
    init_attn(ps, rng, "enc.mid.attn", top)?;
    init_block(ps, rng, "enc.mid.1", top, top, cond)?;
    for (name, ci, co, attn) in &p.up {
        init_block(ps, rng, name, *ci, *co, cond)?;
        if *attn {
            init_attn(ps, rng, &format!("{name}.attn"), *co)?;
        }
    }
    for level in 0..cfg.mults.len() - 1 {
        let c = cfg.width(level + 1);
        nn::init_conv(ps, rng, &format!("enc.upsample.{level}"), c, c, 3, 1.0)?;
    }
    nn::init_norm(ps, "enc.out.n", cfg.base)?;
    match head {
        Head::Planes => {
            nn::init_conv(ps, rng, "enc.out.c", cfg.base, cfg.channels, 3, 1.0)?;
            nn::init_norm(ps, "enc.polar.n", top)?;
            nn::init_conv(ps, rng, "enc.polar.c", top, cfg.polar_channels, 1, 1.0)?;
        }
        Head::Rgb => nn::init_conv(ps, rng, "enc.out.c", cfg.base, 3, 3, 1.0)?,
    }
    Ok(())
}

/// Sinusoidal features of a raw timestep at geometrically spaced frequencies.
pub fn fourier_features(t: f64) -> [f64; 2 * TIME_FREQS] {
    let mut out = [0.0; 2 * TIME_FREQS];
    for k in 0..TIME_FREQS {
        let freq = (-(10000f64).ln() * k as f64 / TIME_FREQS as f64).exp();
        out[k] = (t * freq).sin();
        out[TIME_FREQS + k] = (t * freq).cos();
    }
    out
}

/// Timestep embedding `[V, time_dim]`, plus the class row when given.
pub fn timestep_embed<T: Real>(p: &BoundParams<T>, timesteps: &[f64], class: Option<usize>) -> Result<Tensor<T>> {
    let v = timesteps.len();
    let feats: Vec<f64> = timesteps.iter().flat_map(|&t| fourier_features(t)).collect();
    let x = Tensor::from_f64(&[v, 2 * TIME_FREQS], &feats)?;
    let e = nn::mlp2(p, "enc.time", &x)?;
    match class {
        None => Ok(e),
        Some(c) => {
            let table = p.get("enc.class")?;
            if c >= table.dim(0) {
                return Err(Error::arg("encoder", format!("class {c} outside table of {}", table.dim(0))));
            }
            Ok(e.add(&table.gather_rows(&[c])?)?)
        }
    }
}

/// `[V, 4 * POSE_WIDTH]`: each view's own pose embedding, then the
/// elementwise max over the other views' (zeros when there are none).
pub fn pose_embed<T: Real>(p: &BoundParams<T>, poses: &[CameraPose]) -> Result<Tensor<T>> {
    let v = poses.len();
    let mut ext = Vec::with_capacity(v * 16);
    let mut int = Vec::with_capacity(v * 9);
    for pose in poses {
        let f = pose_flatten(pose);
        ext.extend_from_slice(&f[..16]);
        int.extend_from_slice(&f[16..]);
    }
    let e = nn::mlp2(p, "enc.pose.ext", &Tensor::from_f64(&[v, 16], &ext)?)?;
    let i = nn::mlp2(p, "enc.pose.int", &Tensor::from_f64(&[v, 9], &int)?)?;
    let own = Tensor::concat(&[&e, &i], 1)?;
    let d = own.dim(1);
    let mask: Vec<bool> = (0..v * v).map(|k| k / v != k % v).collect();
    let others = own.reshape(&[v, 1, d])?.broadcast_to(&[v, v, d])?.max_axis0_masked(&mask)?;
    Ok(Tensor::concat(&[&own, &others], 1)?)
}

fn res_block<T: Real>(
    p: &BoundParams<T>,
    name: &str,
    x: &Tensor<T>,
    cond: &Tensor<T>,
    groups: usize,
) -> Result<Tensor<T>> {
    let h = nn::group_norm(p, &format!("{name}.n1"), x, groups)?.silu()?;
    let h = nn::conv(p, &format!("{name}.c1"), &h, 1, 1)?;
    let c = nn::linear(p, &format!("{name}.cond"), &cond.silu()?)?;
    let (v, co) = (c.dim(0), c.dim(1));
    let h = h.add(&c.reshape(&[v, co, 1, 1])?)?;
    let h = nn::group_norm(p, &format!("{name}.n2"), &h, groups)?.silu()?;
    let h = nn::conv(p, &format!("{name}.c2"), &h, 1, 1)?;
    let skip_name = format!("{name}.skip");
    let skip = match p.get(&format!("{skip_name}.w")) {
        Ok(_) => nn::conv(p, &skip_name, x, 1, 0)?,
        Err(_) => x.clone(),
    };
    Ok(h.add(&skip)?)
}

/// Multi-head linear attention with an `elu + 1` feature map and a
/// residual connection. `x` is `[V, C, h, w]`; with `cross_view` all
/// `V * h * w` positions form one token set, otherwise each view is its own.
pub fn linear_attention<T: Real>(
    p: &BoundParams<T>,
    name: &str,
    x: &Tensor<T>,
    heads: usize,
    groups: usize,
    cross_view: bool,
) -> Result<Tensor<T>> {
    let [v, c, h, w] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
    let g = if cross_view { 1 } else { v };
    let n = v * h * w / g;
    let d = c / heads;
    let xn = nn::group_norm(p, &format!("{name}.n"), x, groups)?;
    let tokens = xn.permute(&[0, 2, 3, 1])?.reshape(&[v * h * w, c])?;
    let split = |t: Tensor<T>| -> Result<Tensor<T>> {
        Ok(t.reshape(&[g, n, heads, d])?.permute(&[0, 2, 1, 3])?.reshape(&[g * heads, n, d])?)
    };
    let feat = |t: Tensor<T>| -> Result<Tensor<T>> { Ok(t.elu()?.add_scalar(1.0)?) };
    let q = feat(split(nn::linear(p, &format!("{name}.q"), &tokens)?)?)?;
    let k = feat(split(nn::linear(p, &format!("{name}.k"), &tokens)?)?)?;
    let val = split(nn::linear(p, &format!("{name}.v"), &tokens)?)?;
    let kt = k.transpose_last()?;
    let kv = kt.matmul(&val)?;
    let num = q.matmul(&kv)?;
    let ksum = kt.sum_axis(2, true)?;
    let den = q.matmul(&ksum)?;
    let out = num.div(&den)?;
    let out = out
        .reshape(&[g, heads, n, d])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[v * h * w, c])?;
    let out = nn::linear(p, &format!("{name}.o"), &out)?;
    let out = out.reshape(&[v, h, w, c])?.permute(&[0, 3, 1, 2])?;
    Ok(x.add(&out)?)
}

/// Runs the U-Net on signed images `x: [V, 3, H, W]`.
pub fn encode<T: Real>(
    p: &BoundParams<T>,
    cfg: &EncoderConfig,
    head: Head,
    x: &Tensor<T>,
    cond: &ViewConditioning,
) -> Result<EncoderOutput<T>> {
    if x.rank() != 4 || x.dim(1) != 3 {
        return Err(Error::arg("encoder", format!("expected [V, 3, H, W], got {:?}", x.shape())));
    }
    let v = x.dim(0);
    if v == 0 {
        return Err(Error::arg("encoder", "no views"));
    }
    if cond.timesteps.len() != v || cond.poses.len() != v {
        return Err(Error::arg(
            "encoder",
            format!("{v} views but {} timesteps and {} poses", cond.timesteps.len(), cond.poses.len()),
        ));
    }
    let (hh, ww) = (x.dim(2), x.dim(3));
    cfg.check_resolution(hh, ww)?;
    let c = Tensor::concat(
        &[&timestep_embed(p, &cond.timesteps, cond.class.filter(|_| cfg.classes > 0))?, &pose_embed(p, &cond.poses)?],
        1,
    )?;
    let gn = cfg.groups;
    let attn = |name: &str, h: Tensor<T>| linear_attention(p, &format!("{name}.attn"), &h, cfg.heads, gn, cfg.cross_view);
    let pl = plan(cfg);
    let levels = cfg.mults.len();
    let bpl = cfg.blocks_per_level;

    let mut h = nn::conv(p, "enc.in", x, 1, 1)?;
    let mut skips = Vec::new();
    for (i, (name, _, _, has_attn)) in pl.down.iter().enumerate() {
        h = res_block(p, name, &h, &c, gn)?;
        if *has_attn {
            h = attn(name, h)?;
        }
        skips.push(h.clone());
        let level = i / bpl;
        if (i + 1) % bpl == 0 && level + 1 < levels {
            h = nn::conv(p, &format!("enc.downsample.{level}"), &h, 2, 1)?;
        }
    }
    h = res_block(p, "enc.mid.0", &h, &c, gn)?;
    h = linear_attention(p, "enc.mid.attn", &h, cfg.heads, gn, cfg.cross_view)?;
    h = res_block(p, "enc.mid.1", &h, &c, gn)?;
    let mid = h.clone();
    for (i, (name, _, _, has_attn)) in pl.up.iter().enumerate() {
        let s = skips.pop().expect("one skip per block");
        h = res_block(p, name, &Tensor::concat(&[&h, &s], 1)?, &c, gn)?;
        if *has_attn {
            h = attn(name, h)?;
        }
        let level = levels - 1 - i / bpl;
        if (i + 1) % bpl == 0 && level > 0 {
            h = nn::conv(p, &format!("enc.upsample.{}", level - 1), &h.upsample_nearest2x()?, 1, 1)?;
        }
    }
    let out = nn::group_norm(p, "enc.out.n", &h, gn)?.silu()?;
    let out = nn::conv(p, "enc.out.c", &out, 1, 1)?;
    match head {
        Head::Rgb => Ok(EncoderOutput {
            planes: out.tanh()?,
            polar: None,
        }),
        Head::Planes => {
            let pol = nn::group_norm(p, "enc.polar.n", &mid, gn)?.silu()?;
            let pol = nn::conv(p, "enc.polar.c", &pol, 1, 0)?.resize_bilinear(hh / 2, hh)?;
            Ok(EncoderOutput {
                planes: out,
                polar: Some(pol),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    pub(crate) fn tiny() -> EncoderConfig {
        EncoderConfig {
            base: 8,
            mults: vec![1, 2],
            attn_levels: vec![1],
            heads: 2,
            groups: 2,
            channels: 4,
            polar_channels: 2,
            time_dim: 16,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn default_has_eight_blocks() {
        let mut ps = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_params(&mut ps, &mut rng, &EncoderConfig::default(), Head::Planes).unwrap();
        let blocks = ps.names().filter(|n| n.ends_with(".c1.w")).count();
        assert_eq!(blocks, 8);
        assert!(ps.names().all(|n| n.starts_with("enc.")));
    }

    #[test]
    fn output_shapes() {
        let cfg = tiny();
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        init_params(&mut ps, &mut rng, &cfg, Head::Planes).unwrap();
        let p = ps.bind(None).unwrap();
        let x = Tensor::<f64>::zeros(&[3, 3, 8, 8]);
        let poses = vec![CameraPose::new(
            nalgebra::Matrix4::identity(),
            CameraPose::pinhole(8.0, 8, 8),
            8,
            8,
        )
        .unwrap(); 3];
        let cond = ViewConditioning {
            timesteps: vec![0.0, 10.0, 10.0],
            poses,
            class: None,
        };
        let out = encode(&p, &cfg, Head::Planes, &x, &cond).unwrap();
        assert_eq!(out.planes.shape(), &[3, 4, 8, 8]);
        assert_eq!(out.polar.unwrap().shape(), &[3, 2, 4, 8]);
    }

    #[test]
    fn fourier_distinguishes_timesteps() {
        let a = fourier_features(0.0);
        let b = fourier_features(1.0);
        let c = fourier_features(1000.0);
        let dist = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
        assert!(dist(&a, &b) > 0.0 && dist(&a, &c) > 0.0 && dist(&b, &c) > 0.0);
    }
}
