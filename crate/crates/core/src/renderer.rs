//! Emission-absorption volume rendering over an [`IBPlanesScene`].
//!
//! Every ray draws its stratified depths, background colour and importance
//! samples from its own RNG, seeded from the pixel identity, so a pixel
//! renders the same whether it is drawn alone or as part of a full image.

use gibr_diffcore::{BoundParams, Real, Tensor};
use nalgebra::Vector3;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::CameraPose;
use crate::ibplanes::{decode_points, IBPlanesScene};
use crate::io::{Image, ScalarMap};

pub const NEAR: f64 = 0.05;
/// Half-extent of the generator's working box.
pub const SCENE_HALF_EXTENT: f64 = 1.0;
/// Floor on the depth normaliser of empty rays.
pub const EPS_W: f64 = 1e-8;
const MIN_DELTA: f64 = 1e-6;
/// Background used at evaluation and sampling time.
pub const EVAL_BACKGROUND: [f64; 3] = [0.5, 0.5, 0.5];

/// Four times the diagonal of the working box.
pub fn default_far() -> f64 {
    4.0 * (2.0 * SCENE_HALF_EXTENT) * 3f64.sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderConfig {
    pub near: f64,
    pub far: f64,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub use_polar: bool,
    /// Rays per decoder call when rendering whole images.
    pub chunk: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            near: NEAR,
            far: default_far(),
            n_coarse: 32,
            n_fine: 32,
            use_polar: true,
            chunk: 2048,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Background {
    /// Uniform in `[0, 1]^3`, drawn once per ray.
    Random,
    Fixed([f64; 3]),
}

/// Samples along one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub depths: Vec<f64>,
    pub deltas: Vec<f64>,
    pub densities: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub rgb: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub weights: Vec<f64>,
    /// Transmittance left after the last sample.
    pub background_weight: f64,
}

/// One uniform sample per equal-width bin of `[near, far]`; bin midpoints
/// when `rng` is `None`.
pub fn stratified_depths<R: Rng>(near: f64, far: f64, n: usize, rng: Option<&mut R>) -> Result<Vec<f64>> {
    if !(near > 0.0 && far > near && far.is_finite()) || n == 0 {
        return Err(Error::arg(
            "stratified_depths",
            format!("need 0 < near < far and n > 0, got near {near}, far {far}, n {n}"),
        ));
    }
    let w = (far - near) / n as f64;
    Ok(match rng {
        Some(rng) => (0..n).map(|i| near + (i as f64 + rng.random::<f64>()) * w).collect(),
        None => (0..n).map(|i| near + (i as f64 + 0.5) * w).collect(),
    })
}

/// Inverse-transform samples from the piecewise-constant density
/// proportional to `weights` over the equal bins of `[near, far]`.
/// Falls back to stratified sampling when every weight is zero.
pub fn importance_depths<R: Rng>(near: f64, far: f64, weights: &[f64], m: usize, rng: &mut R) -> Result<Vec<f64>> {
    let n = weights.len();
    if n == 0 || !(far > near) {
        return Err(Error::arg("importance_depths", "need bins and near < far"));
    }
    let total: f64 = weights.iter().map(|w| w.max(0.0)).sum();
    if !(total > 0.0) || !total.is_finite() {
        return stratified_depths(near, far, m.max(1), Some(rng)).map(|mut d| {
            d.truncate(m);
            d
        });
    }
    let bw = (far - near) / n as f64;
    let mut cdf = Vec::with_capacity(n + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for w in weights {
        acc += w.max(0.0) / total;
        cdf.push(acc);
    }
    let mut out = Vec::with_capacity(m);
    for _ in 0..m {
        let u = rng.random::<f64>() * acc;
        // first bin whose upper cdf exceeds u, skipping empty bins
        let mut i = cdf[1..].partition_point(|&c| c <= u).min(n - 1);
        while weights[i] <= 0.0 && i + 1 < n {
            i += 1;
        }
        let span = cdf[i + 1] - cdf[i];
        let frac = if span > 0.0 { ((u - cdf[i]) / span).clamp(0.0, 1.0) } else { 0.5 };
        out.push(near + (i as f64 + frac) * bw);
    }
    Ok(out)
}

/// Segment lengths of ascending `depths`; the last runs to `far`.
pub fn deltas(depths: &[f64], far: f64) -> Vec<f64> {
    let n = depths.len();
    (0..n)
        .map(|i| {
            let next = if i + 1 < n { depths[i + 1] } else { far };
            (next - depths[i]).max(MIN_DELTA)
        })
        .collect()
}

/// Emission-absorption compositing of one ray.
pub fn composite(s: &RaySamples, background: [f64; 3]) -> RenderOutput {
    let mut weights = Vec::with_capacity(s.depths.len());
    let mut optical = 0.0f64;
    let mut rgb = [0.0; 3];
    let mut depth_acc = 0.0;
    for i in 0..s.depths.len() {
        let x = s.densities[i] * s.deltas[i];
        let trans = (-optical).exp();
        let alpha = if x.is_infinite() { 1.0 } else { -(-x).exp_m1() };
        let w = trans * alpha;
        optical += x;
        for c in 0..3 {
            rgb[c] += w * s.colors[i][c];
        }
        depth_acc += w * s.depths[i];
        weights.push(w);
    }
    let opacity: f64 = weights.iter().sum();
    for c in 0..3 {
        rgb[c] += (1.0 - opacity) * background[c];
    }
    RenderOutput {
        rgb,
        depth: depth_acc / opacity.max(EPS_W),
        opacity,
        weights,
        background_weight: (-optical).exp(),
    }
}

/// Deterministic 64-bit seed from a list of identifiers.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x243f_6a88_85a3_08d3u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        // splitmix64 finaliser
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// Identity of the pixel a ray belongs to, used to derive its RNG.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelKey {
    pub global: u64,
    pub scene: u64,
    pub view: u64,
    pub step: u64,
}

impl PixelKey {
    pub fn seed(&self, row: usize, col: usize) -> u64 {
        mix_seed(&[self.global, self.scene, self.view, row as u64, col as u64, self.step])
    }
}

#[derive(Debug, Clone)]
pub struct RayRequest {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub exclude: Option<usize>,
    pub seed: u64,
}

/// Rendered colours (tracked when the scene or parameters are) plus
/// per-ray depth and opacity values.
pub struct RenderedRays<T: Real> {
    /// `[R, 3]`.
    pub rgb: Tensor<T>,
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
}

struct RayPlan {
    depths: Vec<Vec<f64>>,
    backgrounds: Vec<[f64; 3]>,
}

fn points_of(rays: &[RayRequest], depths: &[Vec<f64>]) -> (Vec<Vector3<f64>>, Vec<Option<usize>>) {
    let mut pts = Vec::new();
    let mut ex = Vec::new();
    for (r, ds) in rays.iter().zip(depths) {
        for &d in ds {
            pts.push(r.origin + r.direction * d);
            ex.push(r.exclude);
        }
    }
    (pts, ex)
}

/// Full coarse + fine pipeline for a batch of rays.
///
/// The coarse pass runs without gradients and only places the fine samples;
/// the returned colours come from one tracked pass over the merged, sorted
/// depths. With `n_fine = 0` the stratified depths are used directly.
pub fn render_rays<T: Real>(
    scene: &IBPlanesScene<T>,
    params: &BoundParams<T>,
    rays: &[RayRequest],
    cfg: &RenderConfig,
    background: Background,
) -> Result<RenderedRays<T>> {
    if rays.iter().any(|r| r.exclude.is_some()) && scene.views() < 2 {
        return Err(Error::arg("render_rays", "cannot exclude the only view of a scene"));
    }
    if rays.is_empty() {
        return Ok(RenderedRays {
            rgb: Tensor::zeros(&[0, 3]),
            depth: Vec::new(),
            opacity: Vec::new(),
        });
    }
    let mut rngs: Vec<ChaCha8Rng> = rays.iter().map(|r| ChaCha8Rng::seed_from_u64(r.seed)).collect();
    let mut plan = RayPlan {
        depths: Vec::with_capacity(rays.len()),
        backgrounds: Vec::with_capacity(rays.len()),
    };
    for rng in rngs.iter_mut() {
        plan.depths.push(stratified_depths(cfg.near, cfg.far, cfg.n_coarse, Some(&mut *rng))?);
        plan.backgrounds.push(match background {
            Background::Random => [rng.random(), rng.random(), rng.random()],
            Background::Fixed(c) => c,
        });
    }
    if cfg.n_fine > 0 {
        let (pts, ex) = points_of(rays, &plan.depths);
        let coarse = decode_points(&scene.detach(), &params.detached(), &pts, &ex, cfg.use_polar)?;
        let dens = coarse.density.to_f64_vec();
        let nc = cfg.n_coarse;
        for (r, rng) in rngs.iter_mut().enumerate() {
            let ds = &plan.depths[r];
            let sig = &dens[r * nc..(r + 1) * nc];
            let dl = deltas(ds, cfg.far);
            let mut optical = 0.0f64;
            let w: Vec<f64> = sig
                .iter()
                .zip(&dl)
                .map(|(s, d)| {
                    let x: f64 = s * d;
                    let w = (-optical).exp() * -(-x).exp_m1();
                    optical += x;
                    w
                })
                .collect();
            let mut fine = importance_depths(cfg.near, cfg.far, &w, cfg.n_fine, rng)?;
            fine.extend_from_slice(ds);
            fine.sort_by(f64::total_cmp);
            plan.depths[r] = fine;
        }
    }
    let n = plan.depths[0].len();
    let nr = rays.len();
    let (pts, ex) = points_of(rays, &plan.depths);
    let dec = decode_points(scene, params, &pts, &ex, cfg.use_polar)?;
    let mut delta = Vec::with_capacity(nr * n);
    for ds in &plan.depths {
        delta.extend(deltas(ds, cfg.far));
    }
    let delta_t = Tensor::constant(&[nr, n], delta.iter().map(|&v| T::lit(v)).collect())?;
    let sd = dec.density.reshape(&[nr, n])?.mul(&delta_t)?;
    let trans = sd.cumsum_exclusive()?.neg()?.exp()?;
    let alpha = sd.neg()?.exp()?.neg()?.add_scalar(1.0)?;
    let w = trans.mul(&alpha)?;
    let colors = dec.rgb.reshape(&[nr, n, 3])?;
    let wc = w.reshape(&[nr, n, 1])?.mul(&colors)?.sum_axis(1, false)?;
    let acc = w.sum_axis(1, true)?;
    let bg: Vec<T> = plan.backgrounds.iter().flat_map(|c| c.map(T::lit)).collect();
    let bg_t = Tensor::constant(&[nr, 3], bg)?;
    let rgb = wc.add(&bg_t)?.sub(&acc.mul(&bg_t)?)?;

    let wv = w.to_f64_vec();
    let mut depth = Vec::with_capacity(nr);
    let mut opacity = Vec::with_capacity(nr);
    for (r, ds) in plan.depths.iter().enumerate() {
        let ws = &wv[r * n..(r + 1) * n];
        let o: f64 = ws.iter().sum();
        let d: f64 = ws.iter().zip(ds).map(|(a, b)| a * b).sum();
        depth.push(d / o.max(EPS_W));
        opacity.push(o);
    }
    Ok(RenderedRays { rgb, depth, opacity })
}

/// Number of pixels rendered for a subsampling fraction.
pub fn subsample_count(fraction: f64, width: usize, height: usize) -> usize {
    ((fraction * (width * height) as f64).round() as usize).min(width * height)
}

/// `round(fraction * H * W)` pixel indices drawn without replacement, sorted.
pub fn subsample_pixels<R: Rng>(fraction: f64, width: usize, height: usize, rng: &mut R) -> Vec<usize> {
    let n = width * height;
    let k = subsample_count(fraction, width, height);
    let mut v = index::sample(rng, n, k).into_vec();
    v.sort_unstable();
    v
}

/// Rays through the given pixels (row-major indices) of `pose`.
pub fn pixel_rays(
    pose: &CameraPose,
    pixels: &[usize],
    key: PixelKey,
    exclude: Option<usize>,
) -> Result<Vec<RayRequest>> {
    pixels
        .iter()
        .map(|&i| {
            let (row, col) = (i / pose.width, i % pose.width);
            let ray = pose.ray_for_pixel(row, col)?;
            Ok(RayRequest {
                origin: ray.origin,
                direction: ray.direction,
                exclude,
                seed: key.seed(row, col),
            })
        })
        .collect()
}

/// A rendered view. Pixels outside the requested subset stay absent.
#[derive(Debug, Clone)]
pub struct RenderedImage {
    pub image: Image,
    pub depth: ScalarMap,
    pub opacity: ScalarMap,
    pub present: Vec<bool>,
}

/// Renders `pose` (or only `subsample` pixels of it) without gradients.
pub fn render_image<T: Real>(
    scene: &IBPlanesScene<T>,
    params: &BoundParams<T>,
    pose: &CameraPose,
    subsample: Option<&[usize]>,
    key: PixelKey,
    cfg: &RenderConfig,
    background: Background,
) -> Result<RenderedImage> {
    let (w, h) = (pose.width, pose.height);
    let all: Vec<usize>;
    let pixels = match subsample {
        Some(p) => p,
        None => {
            all = (0..w * h).collect();
            &all
        }
    };
    let scene = scene.detach();
    let params = params.detached();
    let mut image = Image::filled(w, h, [0.0; 3]);
    let mut depth = ScalarMap::new(w, h, vec![0.0; w * h])?;
    let mut opacity = ScalarMap::new(w, h, vec![0.0; w * h])?;
    let mut present = vec![false; w * h];
    for chunk in pixels.chunks(cfg.chunk.max(1)) {
        let rays = pixel_rays(pose, chunk, key, None)?;
        let out = render_rays(&scene, &params, &rays, cfg, background)?;
        let rgb = out.rgb.to_f64_vec();
        for (k, &i) in chunk.iter().enumerate() {
            image.data[i * 3..i * 3 + 3].copy_from_slice(&rgb[k * 3..k * 3 + 3]);
            depth.data[i] = out.depth[k];
            opacity.data[i] = out.opacity[k];
            present[i] = true;
        }
    }
    Ok(RenderedImage {
        image,
        depth,
        opacity,
        present,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midpoints() {
        let d = stratified_depths::<ChaCha8Rng>(1.0, 5.0, 4, None).unwrap();
        assert_eq!(d, vec![1.5, 2.5, 3.5, 4.5]);
        assert!(stratified_depths::<ChaCha8Rng>(0.0, 1.0, 4, None).is_err());
        assert!(stratified_depths::<ChaCha8Rng>(2.0, 1.0, 4, None).is_err());
    }

    #[test]
    fn two_half_alphas() {
        let x = std::f64::consts::LN_2;
        let s = RaySamples {
            depths: vec![1.0, 2.0],
            deltas: vec![1.0, 1.0],
            densities: vec![x, x],
            colors: vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        };
        let out = composite(&s, [0.0, 0.0, 1.0]);
        assert!((out.weights[0] - 0.5).abs() < 1e-15);
        assert!((out.weights[1] - 0.25).abs() < 1e-15);
        for (a, b) in out.rgb.iter().zip([0.5, 0.25, 0.25]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn opaque_and_empty_rays() {
        let empty = RaySamples {
            depths: vec![1.0],
            deltas: vec![1.0],
            densities: vec![0.0],
            colors: vec![[1.0, 1.0, 1.0]],
        };
        let out = composite(&empty, [0.2, 0.3, 0.4]);
        assert_eq!(out.rgb, [0.2, 0.3, 0.4]);
        assert_eq!(out.opacity, 0.0);
        let opaque = RaySamples {
            densities: vec![f64::INFINITY],
            colors: vec![[0.9, 0.1, 0.3]],
            ..empty
        };
        let out = composite(&opaque, [0.2, 0.3, 0.4]);
        assert_eq!(out.rgb, [0.9, 0.1, 0.3]);
        assert_eq!(out.opacity, 1.0);
    }

    #[test]
    fn importance_point_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = importance_depths(1.0, 5.0, &[0.0, 0.0, 2.0, 0.0], 100, &mut rng).unwrap();
        assert!(d.iter().all(|&x| (3.0..=4.0).contains(&x)));
    }

    #[test]
    fn subsample_rounding() {
        assert_eq!(subsample_count(0.05, 64, 64), 205);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let px = subsample_pixels(0.05, 64, 64, &mut rng);
        assert_eq!(px.len(), 205);
        assert!(px.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn seeds_differ_per_pixel() {
        let k = PixelKey {
            global: 1,
            scene: 2,
            view: 3,
            step: 4,
        };
        assert_ne!(k.seed(0, 1), k.seed(1, 0));
        assert_eq!(k.seed(5, 6), k.seed(5, 6));
    }
}
