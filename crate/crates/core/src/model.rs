//! The denoiser: encoder followed by rendering of every view.

use gibr_diffcore::{BoundParams, ParamStore, Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{self, EncoderConfig, Head, ViewConditioning};
use crate::error::{Error, Result};
use crate::geometry::CameraPose;
use crate::ibplanes::{self, IBPlanesScene};
use crate::io::{Image, ScalarMap};
use crate::renderer::{self, Background, PixelKey, RenderConfig, EVAL_BACKGROUND};

/// Switches for the ablation study; all on is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablations {
    /// Leave a view's own planes out when rendering it during training.
    pub dropout: bool,
    pub polar: bool,
    pub cross_view: bool,
    /// Off makes the U-Net emit images directly.
    pub three_d: bool,
}

impl Default for Ablations {
    fn default() -> Self {
        Ablations {
            dropout: true,
            polar: true,
            cross_view: true,
            three_d: true,
        }
    }
}

impl Ablations {
    /// Compact `key=0|1` list, stored in checkpoints.
    pub fn tag(&self) -> String {
        format!(
            "dropout={} polar={} cross_view={} three_d={}",
            self.dropout as u8, self.polar as u8, self.cross_view as u8, self.three_d as u8
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub render: RenderConfig,
    pub ablations: Ablations,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            render: RenderConfig::default(),
            ablations: Ablations::default(),
        }
    }
}

impl ModelConfig {
    /// Encoder and render settings with the ablations applied.
    pub fn effective(&self) -> (EncoderConfig, RenderConfig) {
        let mut e = self.encoder.clone();
        e.cross_view &= self.ablations.cross_view;
        let mut r = self.render.clone();
        r.use_polar &= self.ablations.polar;
        (e, r)
    }

    pub fn head(&self) -> Head {
        if self.ablations.three_d {
            Head::Planes
        } else {
            Head::Rgb
        }
    }
}

/// Fresh weights: `enc.*` for the encoder, `ibp.*` for the point decoder.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new();
    encoder::init_params(&mut ps, &mut rng, &cfg.encoder, cfg.head())?;
    if cfg.ablations.three_d {
        ibplanes::init_params(&mut ps, &mut rng, cfg.encoder.channels, cfg.encoder.polar_channels)?;
    }
    Ok(ps)
}

/// Noisy views handed to the denoiser.
#[derive(Debug, Clone)]
pub struct NoisyViews {
    /// Signed values, `[V, 3, H, W]` flattened.
    pub x_t: Vec<f64>,
    pub width: usize,
    pub height: usize,
    pub cond: ViewConditioning,
}

impl NoisyViews {
    pub fn views(&self) -> usize {
        self.cond.poses.len()
    }

    fn check(&self) -> Result<()> {
        let v = self.views();
        if v == 0 || self.cond.timesteps.len() != v || self.x_t.len() != v * 3 * self.width * self.height {
            return Err(Error::arg(
                "denoise",
                format!(
                    "{} values for {} poses and {} timesteps at {}x{}",
                    self.x_t.len(),
                    v,
                    self.cond.timesteps.len(),
                    self.width,
                    self.height
                ),
            ));
        }
        if let Some(p) = self.cond.poses.iter().find(|p| p.width != self.width || p.height != self.height) {
            return Err(Error::arg(
                "denoise",
                format!("pose is {}x{}, images are {}x{}", p.width, p.height, self.width, self.height),
            ));
        }
        Ok(())
    }
}

/// Encoder output: a scene, or images when the 3D stage is ablated.
pub enum Encoded<T: Real> {
    Scene(IBPlanesScene<T>),
    Direct(Tensor<T>),
}

/// Identifies the random streams of one denoiser call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepKey {
    pub global: u64,
    pub scene: u64,
    pub step: u64,
}

impl StepKey {
    pub fn pixel(&self, view: usize) -> PixelKey {
        PixelKey {
            global: self.global,
            scene: self.scene,
            view: view as u64,
            step: self.step,
        }
    }
}

pub fn encode<T: Real>(cfg: &ModelConfig, p: &BoundParams<T>, input: &NoisyViews) -> Result<Encoded<T>> {
    input.check()?;
    let (ecfg, _) = cfg.effective();
    let v = input.views();
    let x = Tensor::from_f64(&[v, 3, input.height, input.width], &input.x_t)?;
    let out = encoder::encode(p, &ecfg, cfg.head(), &x, &input.cond)?;
    match out.polar {
        Some(polar) => Ok(Encoded::Scene(IBPlanesScene::new(out.planes, polar, input.cond.poses.clone())?)),
        None => Ok(Encoded::Direct(out.planes)),
    }
}

/// Signed predictions at `pixels[v]` of each view, stacked into `[R, 3]`.
///
/// In training mode backgrounds are random and, unless ablated, view `v`
/// is rendered without its own planes.
pub fn predict_pixels<T: Real>(
    cfg: &ModelConfig,
    p: &BoundParams<T>,
    enc: &Encoded<T>,
    poses: &[CameraPose],
    pixels: &[Vec<usize>],
    key: StepKey,
    train: bool,
) -> Result<Tensor<T>> {
    let (_, rcfg) = cfg.effective();
    let mut parts = Vec::with_capacity(pixels.len());
    match enc {
        Encoded::Scene(scene) => {
            if train && cfg.ablations.dropout && scene.views() < 2 {
                return Err(Error::arg("denoise", "training with dropout needs at least 2 views"));
            }
            let mut rays = Vec::new();
            for (v, px) in pixels.iter().enumerate() {
                let exclude = (train && cfg.ablations.dropout).then_some(v);
                rays.extend(renderer::pixel_rays(&poses[v], px, key.pixel(v), exclude)?);
            }
            let bg = if train {
                Background::Random
            } else {
                Background::Fixed(EVAL_BACKGROUND)
            };
            let out = renderer::render_rays(scene, p, &rays, &rcfg, bg)?;
            parts.push(out.rgb.scale(2.0)?.add_scalar(-1.0)?);
        }
        Encoded::Direct(img) => {
            let (h, w) = (img.dim(2), img.dim(3));
            for (v, px) in pixels.iter().enumerate() {
                let flat = img.gather_rows(&[v])?.reshape(&[3, h * w])?.transpose_last()?;
                parts.push(flat.gather_rows(px)?);
            }
        }
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    Ok(Tensor::concat(&refs, 0)?)
}

/// Full inference-mode render of every view.
pub struct ViewRender {
    /// Signed `[V, 3, H, W]`.
    pub x0: Vec<f64>,
    pub images: Vec<Image>,
    /// Empty when the 3D stage is ablated.
    pub depths: Vec<ScalarMap>,
}

pub fn render_views<T: Real>(
    cfg: &ModelConfig,
    p: &BoundParams<T>,
    enc: &Encoded<T>,
    poses: &[CameraPose],
    key: StepKey,
) -> Result<ViewRender> {
    let (_, rcfg) = cfg.effective();
    let mut images = Vec::with_capacity(poses.len());
    let mut depths = Vec::new();
    match enc {
        Encoded::Scene(scene) => {
            for (v, pose) in poses.iter().enumerate() {
                let r = renderer::render_image(scene, p, pose, None, key.pixel(v), &rcfg, Background::Fixed(EVAL_BACKGROUND))?;
                images.push(r.image);
                depths.push(r.depth);
            }
        }
        Encoded::Direct(img) => {
            let (h, w) = (img.dim(2), img.dim(3));
            let vals = img.to_f64_vec();
            for chw in vals.chunks(3 * h * w) {
                images.push(Image::from_signed_chw(w, h, chw));
            }
        }
    }
    let mut x0 = Vec::new();
    for img in &images {
        x0.extend(img.to_signed_chw());
    }
    Ok(ViewRender { x0, images, depths })
}
