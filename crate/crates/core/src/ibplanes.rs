//! Image-based feature planes and the point decoder.
//!
//! A scene is a stack of per-view pinhole planes `[V, C, H, W]` and polar
//! (equirectangular) planes `[V, C', H/2, H]`. A world point is looked up in
//! every view, each lookup goes through a shared per-view head, the results
//! are max-pooled across active views and a second network maps the fused
//! vector to density and colour.

use std::f64::consts::PI;

use gibr_diffcore::{BoundParams, ParamStore, Real, SampleMode, Tensor};
use nalgebra::Vector3;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::CameraPose;
use crate::nn;

pub const FEATURE_CHANNELS: usize = 16;
pub const POLAR_CHANNELS: usize = 8;
pub const DIST_FREQS: usize = 4;
pub const DIST_DIMS: usize = 2 * DIST_FREQS;
pub const HEAD_WIDTH: usize = 64;

/// Feature planes plus the poses they are attached to.
#[derive(Debug, Clone)]
pub struct IBPlanesScene<T: Real> {
    pub planes: Tensor<T>,
    pub polar: Tensor<T>,
    pub poses: Vec<CameraPose>,
    /// Views whose features are excluded from every query.
    pub dropped: Vec<bool>,
}

/// Per-point density and colour.
pub struct Decoded<T: Real> {
    /// `[P]`, non-negative.
    pub density: Tensor<T>,
    /// `[P, 3]`, in `(0, 1)`.
    pub rgb: Tensor<T>,
}

impl<T: Real> IBPlanesScene<T> {
    pub fn new(planes: Tensor<T>, polar: Tensor<T>, poses: Vec<CameraPose>) -> Result<Self> {
        if planes.rank() != 4 || polar.rank() != 4 {
            return Err(Error::arg("ibplanes", "planes must be [V, C, H, W]"));
        }
        let v = planes.dim(0);
        if v == 0 || polar.dim(0) != v || poses.len() != v {
            return Err(Error::arg(
                "ibplanes",
                format!(
                    "view counts differ: planes {}, polar {}, poses {}",
                    v,
                    polar.dim(0),
                    poses.len()
                ),
            ));
        }
        Ok(IBPlanesScene {
            planes,
            polar,
            poses,
            dropped: vec![false; v],
        })
    }

    pub fn views(&self) -> usize {
        self.poses.len()
    }

    pub fn channels(&self) -> usize {
        self.planes.dim(1)
    }

    /// Same values with no gradient tracking.
    pub fn detach(&self) -> Self {
        IBPlanesScene {
            planes: self.planes.detach(),
            polar: self.polar.detach(),
            poses: self.poses.clone(),
            dropped: self.dropped.clone(),
        }
    }

    /// Views reordered so that output view `i` is input view `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        Ok(IBPlanesScene {
            planes: self.planes.gather_rows(perm)?,
            polar: self.polar.gather_rows(perm)?,
            poses: perm.iter().map(|&i| self.poses[i].clone()).collect(),
            dropped: perm.iter().map(|&i| self.dropped[i]).collect(),
        })
    }
}

/// Fourier features of `log(1 + d)`.
pub fn dist_embed(d: f64) -> [f64; DIST_DIMS] {
    let x = d.max(0.0).ln_1p();
    let mut out = [0.0; DIST_DIMS];
    for k in 0..DIST_FREQS {
        let a = (1u32 << k) as f64 * PI * x;
        out[2 * k] = a.sin();
        out[2 * k + 1] = a.cos();
    }
    out
}

/// Normalised `(u, v)` of `p` on the pinhole plane of `pose`.
pub fn pinhole_coords(pose: &CameraPose, p: &Vector3<f64>) -> Option<[f64; 2]> {
    let (uv, _) = pose.project(p)?;
    Some([uv.x / pose.width as f64, uv.y / pose.height as f64])
}

/// Normalised `(u, v)` of `p` on the polar plane: azimuth spans the width
/// (`-π` at the left edge), elevation runs from `+π/2` at the top.
pub fn polar_coords(pose: &CameraPose, p: &Vector3<f64>) -> Option<[f64; 2]> {
    let (az, el) = pose.equirect_project(p)?;
    Some([(az + PI) / (2.0 * PI), (PI / 2.0 - el) / PI])
}

pub fn init_params<T: Real>(
    ps: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    channels: usize,
    polar_channels: usize,
) -> Result<()> {
    let d_in = channels + polar_channels + DIST_DIMS;
    nn::init_mlp2(ps, rng, "ibp.head", [d_in, HEAD_WIDTH, HEAD_WIDTH])?;
    nn::init_mlp2(ps, rng, "ibp.fuse", [HEAD_WIDTH, HEAD_WIDTH, 4])
}

/// Which `(view, point)` pairs contribute: entry `v * P + p`.
pub fn active_mask<T: Real>(scene: &IBPlanesScene<T>, exclude: &[Option<usize>]) -> Result<Vec<bool>> {
    let nv = scene.views();
    let np = exclude.len();
    let mut mask = vec![false; nv * np];
    for v in 0..nv {
        for (p, ex) in exclude.iter().enumerate() {
            mask[v * np + p] = !scene.dropped[v] && *ex != Some(v);
        }
    }
    for p in 0..np {
        if !(0..nv).any(|v| mask[v * np + p]) {
            return Err(Error::arg("point_features", format!("every view is excluded for point {p}")));
        }
    }
    Ok(mask)
}

/// Per-view feature vectors `f*_v(p)` for all views, shaped `[V, P, HEAD_WIDTH]`.
///
/// Dropped or excluded views still get a row; [`active_mask`] says which
/// rows take part in fusion.
pub fn point_features<T: Real>(
    scene: &IBPlanesScene<T>,
    params: &BoundParams<T>,
    points: &[Vector3<f64>],
    use_polar: bool,
) -> Result<Tensor<T>> {
    let nv = scene.views();
    let np = points.len();
    let mut pin = Vec::with_capacity(nv * np);
    let mut pin_ok = Vec::with_capacity(nv * np);
    let mut pol = Vec::with_capacity(nv * np);
    let mut pol_ok = Vec::with_capacity(nv * np);
    let mut emb = Vec::with_capacity(nv * np * DIST_DIMS);
    for pose in &scene.poses {
        let centre = pose.center();
        for p in points {
            match pinhole_coords(pose, p) {
                Some(uv) => {
                    pin.push(uv);
                    pin_ok.push(true);
                }
                None => {
                    pin.push([0.0, 0.0]);
                    pin_ok.push(false);
                }
            }
            match polar_coords(pose, p) {
                Some(uv) => {
                    pol.push(uv);
                    pol_ok.push(true);
                }
                None => {
                    pol.push([0.0, 0.0]);
                    pol_ok.push(false);
                }
            }
            emb.extend(dist_embed((p - centre).norm()).iter().map(|&v| T::lit(v)));
        }
    }
    let f = scene.planes.sample_bilinear(&pin, &pin_ok, SampleMode::Clamp)?;
    let fp = if use_polar {
        scene.polar.sample_bilinear(&pol, &pol_ok, SampleMode::WrapX)?
    } else {
        Tensor::zeros(&[nv, np, scene.polar.dim(1)])
    };
    let e = Tensor::constant(&[nv, np, DIST_DIMS], emb)?;
    let x = Tensor::concat(&[&f, &fp, &e], 2)?;
    nn::mlp2(params, "ibp.head", &x)
}

/// Masked max over views followed by the decoder network.
pub fn fuse_and_decode<T: Real>(
    features: &Tensor<T>,
    mask: &[bool],
    params: &BoundParams<T>,
) -> Result<Decoded<T>> {
    if features.rank() != 3 || features.dim(0) == 0 {
        return Err(Error::arg("fuse_and_decode", "expects a non-empty [V, P, F] feature stack"));
    }
    let fused = features.max_axis0_masked(mask)?;
    decode_fused(&fused, params)
}

/// Decoder applied to already fused `[P, HEAD_WIDTH]` features.
pub fn decode_fused<T: Real>(fused: &Tensor<T>, params: &BoundParams<T>) -> Result<Decoded<T>> {
    let np = fused.dim(0);
    let out = nn::mlp2(params, "ibp.fuse", fused)?;
    let density = out.slice(1, 0, 1)?.softplus()?.reshape(&[np])?;
    let rgb = out.slice(1, 1, 4)?.sigmoid()?;
    Ok(Decoded { density, rgb })
}

/// Density and colour at `points`; `exclude[p]` names a view left out for
/// that point (the view being rendered during training).
pub fn decode_points<T: Real>(
    scene: &IBPlanesScene<T>,
    params: &BoundParams<T>,
    points: &[Vector3<f64>],
    exclude: &[Option<usize>],
    use_polar: bool,
) -> Result<Decoded<T>> {
    if exclude.len() != points.len() {
        return Err(Error::arg("decode_points", "one exclusion entry per point"));
    }
    let mask = active_mask(scene, exclude)?;
    let feats = point_features(scene, params, points, use_polar)?;
    fuse_and_decode(&feats, &mask, params)
}

/// Bilinear pinhole feature of view `v` at `p`; zero when `p` cannot be
/// projected or the view is dropped.
pub fn sample_pinhole_feature<T: Real>(scene: &IBPlanesScene<T>, v: usize, p: &Vector3<f64>) -> Result<Vec<f64>> {
    lookup(scene, &scene.planes, v, pinhole_coords(&scene.poses[v], p), SampleMode::Clamp)
}

/// Bilinear polar feature of view `v` at `p`, wrapping in azimuth.
pub fn sample_polar_feature<T: Real>(scene: &IBPlanesScene<T>, v: usize, p: &Vector3<f64>) -> Result<Vec<f64>> {
    lookup(scene, &scene.polar, v, polar_coords(&scene.poses[v], p), SampleMode::WrapX)
}

fn lookup<T: Real>(
    scene: &IBPlanesScene<T>,
    planes: &Tensor<T>,
    v: usize,
    uv: Option<[f64; 2]>,
    mode: SampleMode,
) -> Result<Vec<f64>> {
    if v >= scene.views() {
        return Err(Error::arg("sample feature", format!("view {v} out of range")));
    }
    let c = planes.dim(1);
    let (Some(uv), false) = (uv, scene.dropped[v]) else {
        return Ok(vec![0.0; c]);
    };
    let one = planes.gather_rows(&[v])?;
    Ok(one.sample_bilinear(&[uv], &[true], mode)?.to_f64_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix4;

    fn scene() -> IBPlanesScene<f64> {
        let pose = CameraPose::new(Matrix4::identity(), CameraPose::pinhole(2.0, 2, 2), 2, 2).unwrap();
        // channel 0 = (1 at texel (0,0)), channel 1 = (1 at texel (0,1))
        let planes = Tensor::from_f64(&[1, 2, 2, 2], &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let polar = Tensor::from_f64(&[1, 1, 1, 2], &[0.0, 1.0]).unwrap();
        IBPlanesScene::new(planes, polar, vec![pose]).unwrap()
    }

    #[test]
    fn pinhole_midpoint_and_behind() {
        let s = scene();
        // pixel (1.0, 0.5) is halfway between texel centres (0.5, 0.5) and (1.5, 0.5)
        let p = Vector3::new(0.0, -0.5 * 2.0 / 2.0, 2.0);
        let f = sample_pinhole_feature(&s, 0, &p).unwrap();
        assert!((f[0] - 0.5).abs() < 1e-12 && (f[1] - 0.5).abs() < 1e-12, "{f:?}");
        let behind = sample_pinhole_feature(&s, 0, &Vector3::new(0.0, 0.0, -1.0)).unwrap();
        assert_eq!(behind, vec![0.0, 0.0]);
    }

    #[test]
    fn polar_straight_ahead_hits_centre() {
        let pose = CameraPose::new(Matrix4::identity(), CameraPose::pinhole(2.0, 2, 2), 2, 2).unwrap();
        let uv = polar_coords(&pose, &Vector3::new(0.0, 0.0, 5.0)).unwrap();
        assert_eq!(uv, [0.5, 0.5]);
    }

    #[test]
    fn dropped_view_gives_zero() {
        let mut s = scene();
        s.dropped[0] = true;
        let f = sample_pinhole_feature(&s, 0, &Vector3::new(0.0, 0.0, 2.0)).unwrap();
        assert_eq!(f, vec![0.0, 0.0]);
        assert!(active_mask(&s, &[None]).is_err());
    }

    #[test]
    fn dist_embed_is_bounded() {
        for d in [0.0, 0.5, 3.0, 1e6] {
            assert!(dist_embed(d).iter().all(|v| v.abs() <= 1.0));
        }
        assert_eq!(dist_embed(0.0)[1], 1.0);
    }
}
