//! Image and depth metrics, and the reconstruction protocol built on them.
//!
//! Metrics with suffix D are measured at the poses the diffusion ran at;
//! suffix H at held-out poses placed between them.

use std::fmt::Write as _;
use std::path::Path;

use gibr_diffcore::{ParamStore, Real};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{ddim_sample, Conditioning, ModelDenoiser, NoiseSchedule, SampleRequest};
use crate::error::{Error, Result};
use crate::geometry::{relative_poses, CameraPose};
use crate::io::{Image, ScalarMap};
use crate::model::{Encoded, ModelConfig, StepKey};
use crate::renderer::{mix_seed, render_image, Background, EVAL_BACKGROUND};
use crate::scenegen::{oracle_render, scene_rig, SceneData};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn same_size(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::arg(
            op,
            format!("{}x{} vs {}x{}", a.width, a.height, b.width, b.height),
        ));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` for images in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    same_size("psnr", a, b)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as i64;
    let w: Vec<f64> = (-r..=r).map(|k| (-(k * k) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Half-sample symmetric index (`d c b a | a b c d | d c b a`).
fn reflect(i: i64, n: i64) -> usize {
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

fn blur(x: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; w * h];
    for row in 0..h {
        for col in 0..w {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                s += kv * x[reflect(row as i64 + j as i64 - r, h as i64) * w + col];
            }
            tmp[row * w + col] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for row in 0..h {
        for col in 0..w {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                s += kv * tmp[row * w + reflect(col as i64 + j as i64 - r, w as i64)];
            }
            out[row * w + col] = s;
        }
    }
    out
}

/// SSIM of two single-channel images in `[0, 1]`, averaged over every
/// window that lies fully inside the image.
pub fn ssim_gray(a: &[f64], b: &[f64], w: usize, h: usize) -> Result<f64> {
    if a.len() != w * h || b.len() != w * h {
        return Err(Error::arg("ssim", "buffer sizes do not match the image size"));
    }
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::arg("ssim", format!("{w}x{h} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let k = gaussian_kernel();
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let ma = blur(a, w, h, &k);
    let mb = blur(b, w, h, &k);
    let maa = blur(&prod(a, a), w, h, &k);
    let mbb = blur(&prod(b, b), w, h, &k);
    let mab = blur(&prod(a, b), w, h, &k);
    let pad = SSIM_WINDOW / 2;
    let mut sum = 0.0;
    let mut n = 0usize;
    for row in pad..h - pad {
        for col in pad..w - pad {
            let i = row * w + col;
            let (ua, ub) = (ma[i], mb[i]);
            let va = maa[i] - ua * ua;
            let vb = mbb[i] - ub * ub;
            let cov = mab[i] - ua * ub;
            sum += ((2.0 * ua * ub + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ua * ua + ub * ub + SSIM_C1) * (va + vb + SSIM_C2));
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

/// SSIM on luma.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_size("ssim", a, b)?;
    ssim_gray(&a.luma(), &b.luma(), a.width, a.height)
}

/// 1-based ranks, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman correlation; `None` with fewer than two samples or no spread.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Spearman correlation of depths over pixels where `mask` is set.
pub fn depth_rank_correlation(pred: &ScalarMap, truth: &ScalarMap, mask: &[bool]) -> Result<Option<f64>> {
    if pred.data.len() != truth.data.len() || mask.len() != truth.data.len() {
        return Err(Error::arg("depth_rank_correlation", "depth maps and mask differ in size"));
    }
    let (mut p, mut t) = (Vec::new(), Vec::new());
    for i in 0..mask.len() {
        if mask[i] {
            p.push(pred.data[i]);
            t.push(truth.data[i]);
        }
    }
    Ok(spearman(&p, &t))
}

/// One set of D and H metrics; absent entries could not be measured.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Metrics {
    pub psnr_d: Option<f64>,
    pub ssim_d: Option<f64>,
    pub drc_d: Option<f64>,
    pub psnr_h: Option<f64>,
    pub ssim_h: Option<f64>,
    pub drc_h: Option<f64>,
}

pub const METRIC_NAMES: [&str; 6] = ["psnr_d", "ssim_d", "drc_d", "psnr_h", "ssim_h", "drc_h"];

impl Metrics {
    pub fn values(&self) -> [Option<f64>; 6] {
        [self.psnr_d, self.ssim_d, self.drc_d, self.psnr_h, self.ssim_h, self.drc_h]
    }

    pub fn from_values(v: [Option<f64>; 6]) -> Self {
        Metrics {
            psnr_d: v[0],
            ssim_d: v[1],
            drc_d: v[2],
            psnr_h: v[3],
            ssim_h: v[4],
            drc_h: v[5],
        }
    }
}

fn mean(xs: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.into_iter().flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn opt_max(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.max(y)),
        (x, None) => x,
        (None, y) => y,
    }
}

/// Best value of every metric over the samples, each chosen independently.
pub fn best_per_metric(samples: &[Metrics]) -> Metrics {
    let mut best = [None; 6];
    for s in samples {
        for (b, v) in best.iter_mut().zip(s.values()) {
            *b = opt_max(*b, v);
        }
    }
    Metrics::from_values(best)
}

/// All metrics of the sample with the highest held-out PSNR (diffusion-view
/// PSNR when no held-out views were rendered).
pub fn best_by_psnr(samples: &[Metrics]) -> Option<Metrics> {
    let key = |m: &Metrics| m.psnr_h.or(m.psnr_d).unwrap_or(f64::NEG_INFINITY);
    samples.iter().copied().reduce(|a, b| if key(&b) > key(&a) { b } else { a })
}

/// Mean metric values over a set of view pairs.
pub fn view_metrics(pred: &[Image], truth: &[Image]) -> Result<(Option<f64>, Option<f64>)> {
    if pred.len() != truth.len() {
        return Err(Error::arg("view metrics", "prediction and truth counts differ"));
    }
    let mut p = Vec::new();
    let mut s = Vec::new();
    for (a, b) in pred.iter().zip(truth) {
        p.push(Some(psnr(a, b)?));
        s.push(ssim(a, b).ok());
    }
    Ok((mean(p), mean(s)))
}

/// Mean rank correlation over views with a defined value.
pub fn depth_metric(pred: &[ScalarMap], truth: &[(ScalarMap, Vec<bool>)]) -> Result<Option<f64>> {
    let mut out = Vec::new();
    for (p, (t, m)) in pred.iter().zip(truth) {
        out.push(depth_rank_correlation(p, t, m)?);
    }
    Ok(mean(out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Protocol {
    /// Leading dataset views passed clean.
    pub n_cond: usize,
    /// Total views in the diffusion, conditioning included.
    pub views: usize,
    pub samples: usize,
    pub ddim_steps: usize,
    pub heldout: usize,
    pub seed: u64,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            n_cond: 1,
            views: 4,
            samples: 4,
            ddim_steps: 50,
            heldout: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRow {
    pub scene: String,
    pub samples: Vec<Metrics>,
    pub best: Metrics,
    pub selected: Metrics,
}

/// Held-out poses relative to view 0 with their oracle views.
pub struct HeldOut {
    pub poses: Vec<CameraPose>,
    pub images: Vec<Image>,
    pub depths: Vec<(ScalarMap, Vec<bool>)>,
}

pub fn heldout_views(scene: &SceneData, count: usize) -> Result<HeldOut> {
    let m = &scene.meta;
    let (ps, orbit) = scene_rig(m.seed, m.class, m.views, m.width, m.height)?;
    let world0 = orbit.world_poses()?.swap_remove(0);
    let world = orbit.interleaved_poses(count)?;
    let mut all = vec![world0];
    all.extend(world.iter().cloned());
    let poses = relative_poses(&all, 0)?.split_off(1);
    let mut images = Vec::new();
    let mut depths = Vec::new();
    for w in &world {
        let (img, d) = oracle_render(&ps, w)?;
        let mask = d.data.iter().map(|x| x.is_finite()).collect();
        images.push(img);
        depths.push((d, mask));
    }
    Ok(HeldOut { poses, images, depths })
}

/// Renders an encoded scene at `poses` with the evaluation background.
pub fn render_encoded<T: Real>(
    cfg: &ModelConfig,
    params: &gibr_diffcore::BoundParams<T>,
    enc: &Encoded<T>,
    poses: &[CameraPose],
    key: StepKey,
) -> Result<Option<(Vec<Image>, Vec<ScalarMap>)>> {
    let Encoded::Scene(scene) = enc else {
        return Ok(None);
    };
    let (_, rcfg) = cfg.effective();
    let mut imgs = Vec::new();
    let mut depths = Vec::new();
    for (v, pose) in poses.iter().enumerate() {
        let r = render_image(scene, params, pose, None, key.pixel(v), &rcfg, Background::Fixed(EVAL_BACKGROUND))?;
        imgs.push(r.image);
        depths.push(r.depth);
    }
    Ok(Some((imgs, depths)))
}

/// Best-of-K conditional reconstruction of one dataset scene.
pub fn evaluate_scene<T: Real>(
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    schedule: &NoiseSchedule,
    root: &Path,
    scene: &SceneData,
    protocol: &Protocol,
) -> Result<SceneRow> {
    let v = protocol.views;
    if v > scene.images.len() || protocol.n_cond == 0 || protocol.n_cond >= v || protocol.samples == 0 {
        return Err(Error::arg(
            "evaluate",
            format!(
                "scene {} has {} views; need 0 < n_cond ({}) < views ({v}) and at least one sample",
                scene.name,
                scene.images.len(),
                protocol.n_cond
            ),
        ));
    }
    let nc = protocol.n_cond;
    let truth_d: Vec<Image> = scene.images[..v].to_vec();
    let depth_d: Vec<(ScalarMap, Vec<bool>)> = (0..v).map(|i| scene.read_depth(root, i)).collect::<Result<_>>()?;
    let held = heldout_views(scene, protocol.heldout)?;
    let cond = Conditioning {
        images: scene.images[..nc].to_vec(),
        poses: scene.poses[..nc].to_vec(),
    };
    let denoiser = ModelDenoiser::new(cfg, params)?;
    let scene_id = mix_seed(&[scene.meta.seed]);
    let mut samples = Vec::with_capacity(protocol.samples);
    for k in 0..protocol.samples {
        let seed = mix_seed(&[protocol.seed, scene_id, k as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let req = SampleRequest {
            poses: &scene.poses[nc..v],
            cond: Some(&cond),
            steps: protocol.ddim_steps,
            class: (cfg.encoder.classes > 0).then_some(scene.class),
            global_seed: seed,
            scene_id,
        };
        let out = ddim_sample(&denoiser, schedule, &req, &mut rng)?;
        let (w, h) = (scene.meta.width, scene.meta.height);
        let pred: Vec<Image> = out.x0.chunks(3 * w * h).map(|c| Image::from_signed_chw(w, h, c)).collect();
        let (psnr_d, ssim_d) = view_metrics(&pred, &truth_d)?;
        let mut m = Metrics {
            psnr_d,
            ssim_d,
            ..Metrics::default()
        };
        if let Some(enc) = &out.scene {
            if let Some((_, depths)) = render_encoded(cfg, &denoiser.params, enc, &out.poses, out.key)? {
                m.drc_d = depth_metric(&depths, &depth_d)?;
            }
            if protocol.heldout > 0 {
                let hkey = StepKey { step: u64::MAX, ..out.key };
                if let Some((imgs, depths)) = render_encoded(cfg, &denoiser.params, enc, &held.poses, hkey)? {
                    let (p, s) = view_metrics(&imgs, &held.images)?;
                    m.psnr_h = p;
                    m.ssim_h = s;
                    m.drc_h = depth_metric(&depths, &held.depths)?;
                }
            }
        }
        samples.push(m);
    }
    Ok(SceneRow {
        scene: scene.name.clone(),
        best: best_per_metric(&samples),
        selected: best_by_psnr(&samples).unwrap_or_default(),
        samples,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<SceneRow>,
    pub protocol: Protocol,
    pub config_hash: String,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl EvalReport {
    /// Mean of the per-scene best values.
    pub fn aggregate(&self) -> Metrics {
        let mut out = [None; 6];
        for (i, o) in out.iter_mut().enumerate() {
            *o = mean(self.rows.iter().map(|r| r.best.values()[i]));
        }
        Metrics::from_values(out)
    }

    pub fn aggregate_selected(&self) -> Metrics {
        let mut out = [None; 6];
        for (i, o) in out.iter_mut().enumerate() {
            *o = mean(self.rows.iter().map(|r| r.selected.values()[i]));
        }
        Metrics::from_values(out)
    }

    /// One row per scene and selector, then the means.
    pub fn to_csv(&self) -> String {
        let mut s = format!("scene,selector,k,views,n_cond,{},config_hash\n", METRIC_NAMES.join(","));
        let p = &self.protocol;
        let mut line = |name: &str, sel: &str, m: &Metrics| {
            let vals: Vec<String> = m.values().iter().map(|v| fmt_opt(*v)).collect();
            let _ = writeln!(s, "{name},{sel},{},{},{},{},{}", p.samples, p.views, p.n_cond, vals.join(","), self.config_hash);
        };
        for r in &self.rows {
            line(&r.scene, "per_metric", &r.best);
            line(&r.scene, "by_psnr", &r.selected);
        }
        line("mean", "per_metric", &self.aggregate());
        line("mean", "by_psnr", &self.aggregate_selected());
        s
    }

    pub fn summary(&self) -> String {
        let p = &self.protocol;
        let mut s = String::new();
        let _ = writeln!(s, "scenes: {}", self.rows.len());
        let _ = writeln!(
            s,
            "views: {} ({} conditioning), samples per scene: {}, ddim steps: {}, held-out views: {}",
            p.views, p.n_cond, p.samples, p.ddim_steps, p.heldout
        );
        let _ = writeln!(s, "config hash: {}", self.config_hash);
        for (title, m) in [("best per metric", self.aggregate()), ("best by psnr", self.aggregate_selected())] {
            let _ = writeln!(s, "{title}:");
            for (name, v) in METRIC_NAMES.iter().zip(m.values()) {
                let _ = writeln!(s, "  {name:<7} {}", v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into()));
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_half_offset() {
        let a = Image::filled(4, 4, [0.0; 3]);
        let b = Image::filled(4, 4, [0.5; 3]);
        assert!((psnr(&a, &b).unwrap() - 6.020599913279624).abs() < 1e-12);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert!(psnr(&a, &Image::filled(3, 4, [0.0; 3])).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0], &[1.0]), None);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Image::filled(10, 12, [0.2; 3]);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn reflect_is_half_sample_symmetric() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }
}
