//! Forward noising, the training loss and DDIM sampling.
//!
//! The denoiser predicts clean images (x0); the sampler derives its noise
//! estimate from that prediction.

use gibr_diffcore::{BoundParams, Graph, Real, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::encoder::ViewConditioning;
use crate::error::{Error, Result};
use crate::geometry::{relative_poses, CameraPose};
use crate::io::Image;
use crate::model::{self, Encoded, ModelConfig, NoisyViews, StepKey, ViewRender};
use crate::renderer::subsample_pixels;

/// Smallest cumulative signal level; keeps the last step's β below 1.
pub const ALPHA_BAR_MIN: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub steps: usize,
    /// `beta[t - 1]` is β_t for `t` in `1..=steps`.
    pub beta: Vec<f64>,
    /// `alpha_bar[t]` for `t` in `0..=steps`, with `alpha_bar[0] = 1`.
    pub alpha_bar: Vec<f64>,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl NoiseSchedule {
    /// Sigmoid schedule over `steps` with logit range `[s_lo, s_hi]`.
    pub fn sigmoid(steps: usize, s_lo: f64, s_hi: f64) -> Result<Self> {
        if steps < 2 || !(s_hi > s_lo) {
            return Err(Error::arg("sigmoid schedule", format!("need T >= 2 and s_lo < s_hi, got T={steps}")));
        }
        let (top, bot) = (logistic(-s_lo), logistic(-s_hi));
        let alpha_bar: Vec<f64> = (0..=steps)
            .map(|t| {
                let u = s_lo + (s_hi - s_lo) * t as f64 / steps as f64;
                ((logistic(-u) - bot) / (top - bot)).clamp(ALPHA_BAR_MIN, 1.0)
            })
            .collect();
        if alpha_bar.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::arg("sigmoid schedule", "alpha_bar is not strictly decreasing"));
        }
        let beta = alpha_bar.windows(2).map(|w| 1.0 - w[1] / w[0]).collect();
        Ok(NoiseSchedule { steps, beta, alpha_bar })
    }

    pub fn default_sigmoid() -> Self {
        Self::sigmoid(1000, -3.0, 3.0).expect("default constants are valid")
    }

    pub fn snr(&self, t: usize) -> f64 {
        self.alpha_bar[t] / (1.0 - self.alpha_bar[t])
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::arg("q_sample", format!("t = {t} outside [1, {}]", self.steps)));
        }
        Ok(())
    }

    /// `sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) eps`.
    pub fn q_sample(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_t(t)?;
        if x0.len() != eps.len() {
            return Err(Error::arg("q_sample", "x0 and eps differ in length"));
        }
        let a = self.alpha_bar[t];
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        Ok(x0.iter().zip(eps).map(|(x, e)| sa * x + sn * e).collect())
    }

    /// Timesteps visited by an `n`-step DDIM run, from `T` down.
    pub fn ddim_timesteps(&self, n: usize) -> Result<Vec<usize>> {
        if n == 0 || n > self.steps {
            return Err(Error::arg("ddim", format!("{n} steps with T = {}", self.steps)));
        }
        let mut ts: Vec<usize> = (1..=n).rev().map(|i| (i * self.steps + n / 2) / n).collect();
        ts.dedup();
        Ok(ts)
    }
}

/// Views of one scene with their per-view timesteps.
#[derive(Debug, Clone)]
pub struct MultiViewBatch {
    pub images: Vec<Image>,
    /// Relative to view 0.
    pub poses: Vec<CameraPose>,
    /// How many leading views are clean conditioning views.
    pub n_cond: usize,
    pub class: Option<usize>,
    pub scene_id: u64,
}

impl MultiViewBatch {
    pub fn new(images: Vec<Image>, poses: Vec<CameraPose>, n_cond: usize, class: Option<usize>, scene_id: u64) -> Result<Self> {
        if images.is_empty() || images.len() != poses.len() {
            return Err(Error::arg("batch", format!("{} images and {} poses", images.len(), poses.len())));
        }
        let (w, h) = (images[0].width, images[0].height);
        if images.iter().any(|i| i.width != w || i.height != h) {
            return Err(Error::arg("batch", "images differ in size"));
        }
        if n_cond >= images.len() {
            return Err(Error::arg("batch", "at least one view must be noisy"));
        }
        if images.iter().any(|i| i.data.iter().any(|v| !v.is_finite())) {
            return Err(Error::arg("batch", "non-finite pixel"));
        }
        let poses = relative_poses(&poses, 0)?;
        Ok(MultiViewBatch { images, poses, n_cond, class, scene_id })
    }

    pub fn views(&self) -> usize {
        self.images.len()
    }

    pub fn size(&self) -> (usize, usize) {
        (self.images[0].width, self.images[0].height)
    }

    /// Signed `[V, 3, H, W]` values.
    pub fn x0(&self) -> Vec<f64> {
        self.images.iter().flat_map(|i| i.to_signed_chw()).collect()
    }

    pub fn timesteps(&self, t: usize) -> Vec<f64> {
        (0..self.views()).map(|v| if v < self.n_cond { 0.0 } else { t as f64 }).collect()
    }
}

/// Everything random about one loss evaluation, drawn up front.
#[derive(Debug, Clone)]
pub struct LossDraw {
    pub t: usize,
    /// Same layout as the signed views.
    pub noise: Vec<f64>,
    /// Rendered pixels (row-major indices) per view.
    pub pixels: Vec<Vec<usize>>,
}

impl LossDraw {
    pub fn sample(batch: &MultiViewBatch, schedule: &NoiseSchedule, ray_fraction: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if !(ray_fraction > 0.0 && ray_fraction <= 1.0) {
            return Err(Error::arg("diffusion loss", format!("ray fraction {ray_fraction} outside (0, 1]")));
        }
        let t = rng.random_range(1..=schedule.steps);
        let (w, h) = batch.size();
        let n = batch.views() * 3 * w * h;
        let noise = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let pixels = (0..batch.views()).map(|_| subsample_pixels(ray_fraction, w, h, rng)).collect();
        Ok(LossDraw { t, noise, pixels })
    }
}

/// Noisy input: conditioning views stay clean.
pub fn noisy_views(batch: &MultiViewBatch, schedule: &NoiseSchedule, t: usize, noise: &[f64]) -> Result<NoisyViews> {
    let (w, h) = batch.size();
    let per = 3 * w * h;
    let x0 = batch.x0();
    let mut x_t = schedule.q_sample(&x0, t, noise)?;
    x_t[..batch.n_cond * per].copy_from_slice(&x0[..batch.n_cond * per]);
    Ok(NoisyViews {
        x_t,
        width: w,
        height: h,
        cond: ViewConditioning {
            timesteps: batch.timesteps(t),
            poses: batch.poses.clone(),
            class: batch.class,
        },
    })
}

/// Signed targets at `pixels[v]`, `[R * 3]` in pixel-major order.
pub fn pixel_targets(batch: &MultiViewBatch, pixels: &[Vec<usize>]) -> Vec<f64> {
    let mut out = Vec::new();
    for (img, px) in batch.images.iter().zip(pixels) {
        for &i in px {
            out.extend(img.data[i * 3..i * 3 + 3].iter().map(|v| v * 2.0 - 1.0));
        }
    }
    out
}

/// Mean absolute error between predictions `[R, 3]` and targets.
pub fn l1_loss<T: Real>(pred: &Tensor<T>, target: &[f64]) -> Result<Tensor<T>> {
    let tgt = Tensor::from_f64(pred.shape(), target)?;
    Ok(pred.sub(&tgt)?.abs()?.mean_all()?)
}

/// Loss of one scene under a fixed draw, in training mode.
pub fn diffusion_loss_with<T: Real>(
    cfg: &ModelConfig,
    params: &BoundParams<T>,
    batch: &MultiViewBatch,
    schedule: &NoiseSchedule,
    draw: &LossDraw,
    key: StepKey,
) -> Result<Tensor<T>> {
    if draw.pixels.len() != batch.views() {
        return Err(Error::arg("diffusion loss", "one pixel subset per view"));
    }
    if cfg.ablations.dropout && cfg.ablations.three_d && batch.views() < 2 {
        return Err(Error::arg("diffusion loss", "training with dropout needs at least 2 views"));
    }
    let input = noisy_views(batch, schedule, draw.t, &draw.noise)?;
    let enc = model::encode(cfg, params, &input)?;
    let pred = model::predict_pixels(cfg, params, &enc, &batch.poses, &draw.pixels, key, true)?;
    l1_loss(&pred, &pixel_targets(batch, &draw.pixels))
}

/// Draws `t`, noise and pixels from `rng`, then evaluates the loss.
pub fn diffusion_loss<T: Real>(
    cfg: &ModelConfig,
    params: &BoundParams<T>,
    batch: &MultiViewBatch,
    schedule: &NoiseSchedule,
    ray_fraction: f64,
    key: StepKey,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    let draw = LossDraw::sample(batch, schedule, ray_fraction, rng)?;
    diffusion_loss_with(cfg, params, batch, schedule, &draw, key)
}

/// Anything that maps noisy views to clean-image predictions.
pub trait Denoiser {
    type Scene;

    /// Signed `[V, 3, H, W]` x0 predictions, plus the scene behind them.
    fn denoise(&self, input: &NoisyViews, key: StepKey) -> Result<(Vec<f64>, Option<Self::Scene>)>;
}

/// The trained model in inference mode.
pub struct ModelDenoiser<'a, T: Real> {
    pub config: &'a ModelConfig,
    pub params: BoundParams<T>,
}

impl<'a, T: Real> ModelDenoiser<'a, T> {
    pub fn new(config: &'a ModelConfig, params: &gibr_diffcore::ParamStore<T>) -> Result<Self> {
        Ok(ModelDenoiser {
            config,
            params: params.bind(None)?,
        })
    }

    /// Encodes and renders every view; exposes the depth maps as well.
    pub fn run(&self, input: &NoisyViews, key: StepKey) -> Result<(ViewRender, Encoded<T>)> {
        let enc = model::encode(self.config, &self.params, input)?;
        let r = model::render_views(self.config, &self.params, &enc, &input.cond.poses, key)?;
        Ok((r, enc))
    }
}

impl<T: Real> Denoiser for ModelDenoiser<'_, T> {
    type Scene = Encoded<T>;

    fn denoise(&self, input: &NoisyViews, key: StepKey) -> Result<(Vec<f64>, Option<Encoded<T>>)> {
        let (r, enc) = self.run(input, key)?;
        Ok((r.x0, Some(enc)))
    }
}

/// Clean views to condition on, placed before the noisy ones.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub images: Vec<Image>,
    pub poses: Vec<CameraPose>,
}

pub struct SampleOutput<S> {
    /// All views, conditioning first, signed `[V, 3, H, W]`.
    pub x0: Vec<f64>,
    pub scene: Option<S>,
    /// Poses relative to view 0.
    pub poses: Vec<CameraPose>,
    /// Key of the final denoiser call; re-rendering with it reproduces `x0`.
    pub key: StepKey,
    /// Final iterate of the generated views, signed `[V - n_cond, 3, H, W]`.
    pub samples: Vec<f64>,
}

pub struct SampleRequest<'a> {
    /// Poses of the views to generate.
    pub poses: &'a [CameraPose],
    pub cond: Option<&'a Conditioning>,
    pub steps: usize,
    pub class: Option<usize>,
    pub global_seed: u64,
    pub scene_id: u64,
}

/// Deterministic DDIM (η = 0) from unit Gaussian noise.
pub fn ddim_sample<D: Denoiser>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    req: &SampleRequest,
    rng: &mut ChaCha8Rng,
) -> Result<SampleOutput<D::Scene>> {
    if req.poses.is_empty() {
        return Err(Error::arg("ddim", "need at least one noisy view"));
    }
    let (w, h) = (req.poses[0].width, req.poses[0].height);
    let per = 3 * w * h;
    let (cond_x, mut poses) = match req.cond {
        Some(c) => {
            if c.images.len() != c.poses.len() || c.images.is_empty() {
                return Err(Error::arg(
                    "ddim",
                    format!("{} conditioning images for {} poses", c.images.len(), c.poses.len()),
                ));
            }
            if c.images.iter().any(|i| i.width != w || i.height != h) {
                return Err(Error::arg("ddim", "conditioning images differ in size from the sampled views"));
            }
            (c.images.iter().flat_map(|i| i.to_signed_chw()).collect::<Vec<f64>>(), c.poses.clone())
        }
        None => (Vec::new(), Vec::new()),
    };
    let n_cond = poses.len();
    poses.extend_from_slice(req.poses);
    let poses = relative_poses(&poses, 0)?;
    let v = poses.len();
    let mut x: Vec<f64> = (0..(v - n_cond) * per).map(|_| StandardNormal.sample(rng)).collect();
    let ts = schedule.ddim_timesteps(req.steps)?;
    let mut last = None;
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let mut x_t = cond_x.clone();
        x_t.extend_from_slice(&x);
        let input = NoisyViews {
            x_t,
            width: w,
            height: h,
            cond: ViewConditioning {
                timesteps: (0..v).map(|k| if k < n_cond { 0.0 } else { t as f64 }).collect(),
                poses: poses.clone(),
                class: req.class,
            },
        };
        let key = StepKey {
            global: req.global_seed,
            scene: req.scene_id,
            step: i as u64,
        };
        let (x0, scene) = denoiser.denoise(&input, key)?;
        if x0.len() != v * per {
            return Err(Error::arg("ddim", "denoiser returned the wrong number of values"));
        }
        let (a, ap) = (schedule.alpha_bar[t], schedule.alpha_bar[t_prev]);
        for (k, xk) in x.iter_mut().enumerate() {
            let x0k = x0[n_cond * per + k].clamp(-1.0, 1.0);
            let eps = (*xk - a.sqrt() * x0k) / (1.0 - a).sqrt();
            *xk = ap.sqrt() * x0k + (1.0 - ap).sqrt() * eps;
        }
        last = Some((x0, scene, key));
    }
    let (x0, scene, key) = last.expect("at least one DDIM step");
    Ok(SampleOutput {
        x0,
        scene,
        poses,
        key,
        samples: x,
    })
}

/// Runs `f` on a fresh graph with tracked parameters and returns the loss
/// value and gradients.
pub fn loss_and_grads<T: Real>(
    params: &gibr_diffcore::ParamStore<T>,
    f: impl FnOnce(&BoundParams<T>) -> Result<Tensor<T>>,
) -> Result<(f64, std::collections::BTreeMap<String, Vec<T>>)> {
    let g = Graph::new();
    let bound = params.bind(Some(&g))?;
    let loss = f(&bound)?;
    let value = loss.item().as_f64();
    g.backward(&loss)?;
    Ok((value, bound.grads()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_hand_value() {
        let s = NoiseSchedule {
            steps: 1,
            beta: vec![0.36],
            alpha_bar: vec![1.0, 0.64],
        };
        let x = s.q_sample(&[1.0], 1, &[0.5]).unwrap();
        assert!((x[0] - 1.1).abs() < 1e-15);
        assert!(s.q_sample(&[1.0], 0, &[0.5]).is_err());
        assert!(s.q_sample(&[1.0], 2, &[0.5]).is_err());
    }

    #[test]
    fn default_schedule_endpoints() {
        let s = NoiseSchedule::default_sigmoid();
        assert_eq!(s.alpha_bar[0], 1.0);
        assert!(s.alpha_bar[1000] < 0.01);
        assert_eq!(s.beta.len(), 1000);
    }

    #[test]
    fn ddim_timesteps_span_schedule() {
        let s = NoiseSchedule::default_sigmoid();
        let ts = s.ddim_timesteps(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 1000);
        assert_eq!(*ts.last().unwrap(), 20);
        assert_eq!(s.ddim_timesteps(1000).unwrap(), (1..=1000).rev().collect::<Vec<_>>());
        assert!(s.ddim_timesteps(1001).is_err());
    }

    #[test]
    fn bad_schedule_constants() {
        assert!(NoiseSchedule::sigmoid(1, -3.0, 3.0).is_err());
        assert!(NoiseSchedule::sigmoid(10, 3.0, -3.0).is_err());
    }
}
