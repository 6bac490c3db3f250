//! Minibatch assembly, Adam with global-norm clipping, EMA weights and
//! checkpoints.
//!
//! Every step draws its randomness from `hash(seed, step)`, so a run resumed
//! from a checkpoint follows the same trajectory as an unbroken one.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use gibr_diffcore::{read_checkpoint, write_checkpoint, NamedTensor, ParamStore, Real, Tensor};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{diffusion_loss, loss_and_grads, MultiViewBatch, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{Ablations, ModelConfig, StepKey};
use crate::renderer::mix_seed;
use crate::scenegen::SceneData;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip: f64,
    /// Scenes per step.
    pub batch: usize,
    pub ema_decay: f64,
    pub ray_fraction: f64,
    pub v_min: usize,
    pub v_max: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 8e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip: 1.0,
            batch: 2,
            ema_decay: 0.995,
            ray_fraction: 0.12,
            v_min: 4,
            v_max: 6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::arg("train config", m));
        if !(self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad(format!("ema decay must lie in (0, 1), got {}", self.ema_decay));
        }
        if !(self.ray_fraction > 0.0 && self.ray_fraction <= 1.0) {
            return bad(format!("ray fraction must lie in (0, 1], got {}", self.ray_fraction));
        }
        if self.v_min == 0 || self.v_max < self.v_min || self.batch == 0 {
            return bad(format!("need 1 <= v_min <= v_max and batch >= 1, got {}..{}", self.v_min, self.v_max));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.clip > 0.0) {
            return bad("adam betas must lie in [0, 1) and clip must be positive".into());
        }
        Ok(())
    }
}

/// Random scenes, view counts, views and conditioning counts for one step.
pub fn assemble_batch(dataset: &[SceneData], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<MultiViewBatch>> {
    let usable: Vec<&SceneData> = dataset
        .iter()
        .filter(|s| {
            let ok = s.images.len() >= cfg.v_min;
            if !ok {
                log::warn!("skipping {}: {} views, need {}", s.name, s.images.len(), cfg.v_min);
            }
            ok
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::arg("assemble_batch", format!("no scene has at least {} views", cfg.v_min)));
    }
    let mut out = Vec::with_capacity(cfg.batch);
    for _ in 0..cfg.batch {
        let s = usable[rng.random_range(0..usable.len())];
        let v = rng.random_range(cfg.v_min..=cfg.v_max).min(s.images.len());
        let views = index::sample(rng, s.images.len(), v).into_vec();
        let n_cond = rng.random_range(0..v);
        out.push(MultiViewBatch::new(
            views.iter().map(|&i| s.images[i].clone()).collect(),
            views.iter().map(|&i| s.poses[i].clone()).collect(),
            n_cond,
            Some(s.class),
            s.meta.seed,
        )?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T: Real> {
    pub params: ParamStore<T>,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub ema: ParamStore<T>,
    pub step: u64,
    pub lr: f64,
    /// Set once a non-finite loss has halved the learning rate.
    pub lr_halved: bool,
}

fn zeros_like<T: Real>(ps: &ParamStore<T>) -> Result<ParamStore<T>> {
    let mut out = ParamStore::new();
    for (k, p) in ps.iter() {
        out.insert(k.clone(), &p.shape, vec![T::zero(); p.numel()])?;
    }
    Ok(out)
}

impl<T: Real> TrainState<T> {
    pub fn new(params: ParamStore<T>, lr: f64) -> Result<Self> {
        Ok(TrainState {
            m: zeros_like(&params)?,
            v: zeros_like(&params)?,
            ema: params.clone(),
            params,
            step: 0,
            lr,
            lr_halved: false,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    /// Before clipping.
    pub grad_norm: f64,
    pub lr: f64,
    pub wallclock_ms: f64,
    /// The step was dropped for a non-finite loss.
    pub skipped: bool,
}

impl StepStats {
    /// `step loss grad_norm lr skipped`; wallclock is left out so logs of
    /// identical runs match byte for byte.
    pub fn log_line(&self) -> String {
        format!("{} {:.6e} {:.6e} {:.6e} {}", self.step, self.loss, self.grad_norm, self.lr, self.skipped as u8)
    }
}

/// Global L2 norm over every gradient buffer.
pub fn global_norm<T: Real>(grads: &BTreeMap<String, Vec<T>>) -> f64 {
    grads.values().flat_map(|g| g.iter()).map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
}

/// Scale applied to the gradients so their global norm is at most `clip`.
pub fn clip_scale(norm: f64, clip: f64) -> f64 {
    if norm > clip {
        clip / norm
    } else {
        1.0
    }
}

/// Adam update with bias correction, then the EMA update. `state.step` is
/// the number of updates already applied.
pub fn apply_update<T: Real>(state: &mut TrainState<T>, grads: &BTreeMap<String, Vec<T>>, scale: f64, cfg: &TrainConfig) -> Result<()> {
    let t = (state.step + 1) as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let (b1, b2, eps, lr) = (T::lit(cfg.beta1), T::lit(cfg.beta2), T::lit(cfg.adam_eps), state.lr);
    let one = T::one();
    let d = T::lit(cfg.ema_decay);
    for (name, p) in state.params.iter_mut() {
        let g = grads.get(name).ok_or_else(|| Error::arg("adam", format!("no gradient for {name}")))?;
        let m = state.m.get_mut(name)?.values_mut();
        let v = state.v.get_mut(name)?.values_mut();
        let w = p.values_mut();
        let e = state.ema.get_mut(name)?.values_mut();
        let s = T::lit(scale);
        for i in 0..w.len() {
            let gi = g[i] * s;
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let mh = m[i].as_f64() / bc1;
            let vh = v[i].as_f64() / bc2;
            w[i] = w[i] - T::lit(lr * mh / (vh.sqrt() + eps.as_f64()));
            e[i] = d * e[i] + (one - d) * w[i];
        }
    }
    Ok(())
}

/// Per-step random stream.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(&[seed, step, 0x7a1]))
}

/// One optimisation step over a freshly assembled batch.
pub fn train_step<T: Real>(
    state: &mut TrainState<T>,
    dataset: &[SceneData],
    schedule: &NoiseSchedule,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    let start = Instant::now();
    let mut rng = step_rng(cfg.seed, state.step);
    let batch = assemble_batch(dataset, cfg, &mut rng)?;
    let step = state.step;
    let nb = batch.len() as f64;
    let (loss, grads) = loss_and_grads(&state.params, |p| {
        let mut total: Option<Tensor<T>> = None;
        for b in &batch {
            let key = StepKey {
                global: cfg.seed,
                scene: b.scene_id,
                step,
            };
            let l = diffusion_loss(model, p, b, schedule, cfg.ray_fraction, key, &mut rng)?;
            total = Some(match total {
                None => l,
                Some(t) => t.add(&l)?,
            });
        }
        Ok(total.expect("batch is non-empty").scale(1.0 / nb)?)
    })?;
    let norm = global_norm(&grads);
    let mut stats = StepStats {
        step,
        loss,
        grad_norm: norm,
        lr: state.lr,
        wallclock_ms: 0.0,
        skipped: false,
    };
    if !loss.is_finite() || !norm.is_finite() {
        if state.lr_halved {
            return Err(Error::NonFiniteLoss { step });
        }
        log::warn!("non-finite loss at step {step}; halving the learning rate");
        state.lr /= 2.0;
        state.lr_halved = true;
        stats.skipped = true;
    } else {
        apply_update(state, &grads, clip_scale(norm, cfg.clip), cfg)?;
    }
    state.step += 1;
    stats.wallclock_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(stats)
}

const STEP_CHUNKS: usize = 4;

/// `u64` as four 16-bit chunks, each exact in `f32`.
pub fn encode_u64(x: u64) -> Vec<f32> {
    (0..STEP_CHUNKS).map(|i| ((x >> (16 * i)) & 0xffff) as f32).collect()
}

pub fn decode_u64(v: &[f32]) -> u64 {
    v.iter().enumerate().map(|(i, &c)| (c as u64) << (16 * i)).sum()
}

fn ablation_values(a: &Ablations) -> Vec<f32> {
    [a.dropout, a.polar, a.cross_view, a.three_d].iter().map(|&b| b as u8 as f32).collect()
}

fn record(name: &str, data: Vec<f32>) -> NamedTensor {
    NamedTensor {
        name: name.to_string(),
        shape: vec![data.len()],
        data,
    }
}

/// Full training state: weights, `opt.m.*`, `opt.v.*`, `ema.*`, `train.*`.
pub fn state_records<T: Real>(state: &TrainState<T>, ablations: &Ablations) -> Vec<NamedTensor> {
    let mut out = state.params.to_named("");
    out.extend(state.m.to_named("opt.m."));
    out.extend(state.v.to_named("opt.v."));
    out.extend(state.ema.to_named("ema."));
    out.push(record("train.step", encode_u64(state.step)));
    out.push(record("train.lr", encode_u64(state.lr.to_bits())));
    out.push(record("train.lr_halved", vec![state.lr_halved as u8 as f32]));
    out.push(record("train.ablations", ablation_values(ablations)));
    out
}

/// EMA weights under their plain names, for sampling and evaluation.
pub fn ema_records<T: Real>(state: &TrainState<T>, ablations: &Ablations) -> Vec<NamedTensor> {
    let mut out = state.ema.to_named("");
    out.push(record("train.step", encode_u64(state.step)));
    out.push(record("train.ablations", ablation_values(ablations)));
    out
}

pub fn save_state<T: Real>(path: &Path, state: &TrainState<T>, ablations: &Ablations) -> Result<()> {
    Ok(write_checkpoint(path, &state_records(state, ablations))?)
}

pub fn save_ema<T: Real>(path: &Path, state: &TrainState<T>, ablations: &Ablations) -> Result<()> {
    Ok(write_checkpoint(path, &ema_records(state, ablations))?)
}

fn find<'a>(records: &'a [NamedTensor], name: &str) -> Result<&'a NamedTensor> {
    records
        .iter()
        .find(|r| r.name == name)
        .ok_or_else(|| Error::Incompatible(format!("missing {name}")))
}

fn check_ablations(records: &[NamedTensor], ablations: &Ablations) -> Result<()> {
    let stored = &find(records, "train.ablations")?.data;
    if stored[..] != ablation_values(ablations)[..] {
        let on = |v: &[f32]| {
            ["dropout", "polar", "cross_view", "three_d"]
                .iter()
                .zip(v)
                .map(|(n, x)| format!("{n}={}", *x as u8))
                .collect::<Vec<_>>()
                .join(" ")
        };
        return Err(Error::Incompatible(format!(
            "checkpoint was trained with {} but the config asks for {}",
            on(stored),
            on(&ablation_values(ablations))
        )));
    }
    Ok(())
}

fn model_params<T: Real>(records: &[NamedTensor]) -> ParamStore<T> {
    let plain: Vec<NamedTensor> = records
        .iter()
        .filter(|r| r.name.starts_with("enc.") || r.name.starts_with("ibp."))
        .cloned()
        .collect();
    ParamStore::from_named(&plain, "")
}

/// Restores a full training state; `expected` is the freshly initialised
/// layout the config implies.
pub fn load_state<T: Real>(path: &Path, expected: &ParamStore<T>, ablations: &Ablations) -> Result<TrainState<T>> {
    let records = read_checkpoint(path)?;
    check_ablations(&records, ablations)?;
    let params = model_params(&records);
    let m = ParamStore::from_named(&records, "opt.m.");
    let v = ParamStore::from_named(&records, "opt.v.");
    let ema = ParamStore::from_named(&records, "ema.");
    for (what, ps) in [("weights", &params), ("adam m", &m), ("adam v", &v), ("ema", &ema)] {
        expected
            .check_layout(ps)
            .map_err(|e| Error::Incompatible(format!("{}: {what}: {e}", path.display())))?;
    }
    let lr_halved = find(&records, "train.lr_halved")?.data[0] != 0.0;
    Ok(TrainState {
        params,
        m,
        v,
        ema,
        step: decode_u64(&find(&records, "train.step")?.data),
        lr: f64::from_bits(decode_u64(&find(&records, "train.lr")?.data)),
        lr_halved,
    })
}

/// Weights for inference: the EMA copy when the file holds one.
pub fn load_weights<T: Real>(path: &Path, expected: &ParamStore<T>, ablations: &Ablations) -> Result<ParamStore<T>> {
    let records = read_checkpoint(path)?;
    check_ablations(&records, ablations)?;
    let ema = ParamStore::from_named(&records, "ema.");
    let params = if ema.is_empty() { model_params(&records) } else { ema };
    expected
        .check_layout(&params)
        .map_err(|e| Error::Incompatible(format!("{}: {e}", path.display())))?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_definition() {
        assert_eq!(clip_scale(10.0, 1.0), 0.1);
        assert_eq!(clip_scale(0.5, 1.0), 1.0);
    }

    #[test]
    fn u64_chunks_round_trip() {
        for x in [0, 1, 65535, 65536, u64::MAX, 0.1f64.to_bits()] {
            assert_eq!(decode_u64(&encode_u64(x)), x);
        }
    }

    #[test]
    fn zero_gradient_only_drifts_by_epsilon() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("w", &[3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut st = TrainState::new(ps.clone(), 1e-3).unwrap();
        let grads: BTreeMap<String, Vec<f64>> = [("w".to_string(), vec![0.0; 3])].into();
        apply_update(&mut st, &grads, 1.0, &TrainConfig::default()).unwrap();
        assert_eq!(st.params, ps);
    }

    #[test]
    fn ema_converges_geometrically() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("w", &[1], vec![0.0]).unwrap();
        let mut st = TrainState::new(ps, 1e-3).unwrap();
        st.ema.get_mut("w").unwrap().values_mut()[0] = 1.0;
        let cfg = TrainConfig::default();
        let grads: BTreeMap<String, Vec<f64>> = [("w".to_string(), vec![0.0])].into();
        let mut prev = 1.0;
        for _ in 0..10 {
            apply_update(&mut st, &grads, 1.0, &cfg).unwrap();
            let gap = st.ema.get("w").unwrap().data[0];
            assert!((gap / prev - cfg.ema_decay).abs() < 1e-12);
            prev = gap;
        }
    }
}
