use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gibr_core::diffusion::{ddim_sample, Conditioning, ModelDenoiser, SampleOutput, SampleRequest};
use gibr_core::evaluation::{self, best_by_psnr, best_per_metric, EvalReport, Metrics, METRIC_NAMES};
use gibr_core::geometry::{read_pose, relative_poses, write_pose, CameraPose};
use gibr_core::io::{read_pfm, read_pgm, read_ppm, write_pfm, write_ppm, Image, ScalarMap};
use gibr_core::model::{self, Encoded, StepKey};
use gibr_core::renderer::{mix_seed, render_image, Background, EVAL_BACKGROUND};
use gibr_core::scenegen::{self, load_dataset, view_path, Split};
use gibr_core::training::{self, TrainConfig, TrainState};
use gibr_diffcore::{ParamStore, Real};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::scenefile::{self, StoredScene};

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `run.txt`: command, seed and config hash of whatever produced `dir`.
fn write_run_info(dir: &Path, cfg: &RunConfig, command: &str) -> Result<()> {
    write_text(
        &dir.join("run.txt"),
        &format!(
            "command={command}\nseed={}\nprecision={}\nconfig_hash={}\n",
            cfg.seed,
            cfg.precision.as_str(),
            cfg.hash
        ),
    )
}

fn write_views(dir: &Path, stem: &str, images: &[Image], depths: &[ScalarMap], poses: &[CameraPose]) -> Result<()> {
    for (v, img) in images.iter().enumerate() {
        let p = |suffix: &str| dir.join(format!("{stem}_{v:03}.{suffix}"));
        write_ppm(&p("ppm"), img)?;
        if let Some(d) = depths.get(v) {
            write_pfm(&p("depth.pfm"), d)?;
        }
        write_pose(&p("pose.txt"), &poses[v])?;
    }
    Ok(())
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let d = &cfg.data;
    let entries = scenegen::write_dataset(d.scenes, d.views, d.width, d.height, &d.dir, cfg.seed)?;
    write_run_info(&d.dir, cfg, "gen-data")?;
    let count = |s: Split| entries.iter().filter(|e| e.split == s).count();
    log::info!(
        "wrote {} scenes to {} ({} train, {} val, {} test)",
        entries.len(),
        d.dir.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(())
}

fn open_log(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn validation_loss<T: Real>(cfg: &RunConfig, params: &ParamStore<T>, val: &[scenegen::SceneData]) -> Result<f64> {
    let schedule = cfg.noise_schedule()?;
    let tcfg = TrainConfig {
        batch: cfg.train.val_scenes.max(1),
        ..cfg.train.cfg.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x5a1]));
    let batch = training::assemble_batch(val, &tcfg, &mut rng)?;
    let bound = params.bind(None)?;
    let mut total = 0.0;
    for b in &batch {
        let key = StepKey {
            global: cfg.seed,
            scene: b.scene_id,
            step: u64::MAX,
        };
        let l = gibr_core::diffusion::diffusion_loss(&cfg.model, &bound, b, &schedule, tcfg.ray_fraction, key, &mut rng)?;
        total += l.item().as_f64();
    }
    Ok(total / batch.len() as f64)
}

pub fn train<T: Real>(cfg: &RunConfig, resume: bool) -> Result<()> {
    let tc = &cfg.train;
    let dataset = load_dataset(&cfg.data.dir, Some(Split::Train))
        .with_context(|| format!("loading training data from {}", cfg.data.dir.display()))?;
    if dataset.is_empty() {
        bail!("{}: no training scenes", cfg.data.dir.display());
    }
    let val = if tc.val_every > 0 {
        load_dataset(&cfg.data.dir, Some(Split::Val))?
    } else {
        Vec::new()
    };
    create_dir(&tc.out)?;
    let latest = tc.out.join("ckpt_latest");
    let ema_path = tc.out.join("ckpt_ema");
    let abl = cfg.model.ablations;
    let init = model::init_params::<T>(&cfg.model, cfg.seed)?;
    let mut state = if resume {
        let s = training::load_state(&latest, &init, &abl)?;
        log::info!("resuming from step {}", s.step);
        s
    } else {
        TrainState::new(init, tc.cfg.lr)?
    };
    write_run_info(&tc.out, cfg, "train")?;
    let mut log = open_log(&tc.out.join("train.log"), resume)?;
    let mut timing = open_log(&tc.out.join("timing.log"), resume)?;
    let mut val_log = if val.is_empty() {
        None
    } else {
        Some(open_log(&tc.out.join("val.log"), resume)?)
    };
    let schedule = cfg.noise_schedule()?;
    let save = |state: &TrainState<T>| -> Result<()> {
        training::save_state(&latest, state, &abl)?;
        training::save_ema(&ema_path, state, &abl)?;
        Ok(())
    };
    for _ in 0..tc.steps {
        let stats = training::train_step(&mut state, &dataset, &schedule, &cfg.model, &tc.cfg)?;
        writeln!(log, "{}", stats.log_line())?;
        writeln!(timing, "{} {:.0}", stats.step, stats.wallclock_ms)?;
        let done = state.step;
        if tc.log_every > 0 && done % tc.log_every == 0 {
            log::info!("step {done} loss {:.5} grad norm {:.3}", stats.loss, stats.grad_norm);
            log.flush()?;
            timing.flush()?;
        }
        if let Some(vl) = val_log.as_mut() {
            if done % tc.val_every == 0 {
                let loss = validation_loss(cfg, &state.ema, &val)?;
                writeln!(vl, "{done} {loss:.6e}")?;
                vl.flush()?;
                log::info!("step {done} validation loss {loss:.5}");
            }
        }
        if tc.ckpt_every > 0 && done % tc.ckpt_every == 0 {
            save(&state)?;
        }
    }
    log.flush()?;
    timing.flush()?;
    save(&state)?;
    log::info!("step {}: wrote {} and {}", state.step, latest.display(), ema_path.display());
    Ok(())
}

fn load_model<T: Real>(cfg: &RunConfig, ckpt: &Path) -> Result<ParamStore<T>> {
    let expected = model::init_params::<T>(&cfg.model, 0)?;
    training::load_weights(ckpt, &expected, &cfg.model.ablations).with_context(|| format!("loading {}", ckpt.display()))
}

/// Views, depths, poses and the scene file of one sample; returns the
/// rendered views and depths.
fn write_sample<T: Real>(
    dir: &Path,
    cfg: &RunConfig,
    denoiser: &ModelDenoiser<T>,
    out: &SampleOutput<Encoded<T>>,
    extra: &[CameraPose],
) -> Result<(Vec<Image>, Vec<ScalarMap>)> {
    create_dir(dir)?;
    let (w, h) = (out.poses[0].width, out.poses[0].height);
    let mut images: Vec<Image> = out.x0.chunks(3 * w * h).map(|c| Image::from_signed_chw(w, h, c)).collect();
    let mut depths = Vec::new();
    if let Some(enc @ Encoded::Scene(scene)) = &out.scene {
        if let Some((imgs, ds)) = evaluation::render_encoded(&cfg.model, &denoiser.params, enc, &out.poses, out.key)? {
            images = imgs;
            depths = ds;
        }
        scenefile::save(
            &dir.join(scenefile::FILE_NAME),
            &StoredScene {
                scene: scene.detach(),
                decoder: denoiser_decoder(denoiser),
                key: out.key,
                ablations: cfg.model.ablations,
            },
        )?;
        if !extra.is_empty() {
            let key = StepKey {
                step: u64::MAX,
                ..out.key
            };
            if let Some((imgs, ds)) = evaluation::render_encoded(&cfg.model, &denoiser.params, enc, extra, key)? {
                write_views(dir, "heldout", &imgs, &ds, extra)?;
            }
        }
    }
    write_views(dir, "view", &images, &depths, &out.poses)?;
    Ok((images, depths))
}

fn denoiser_decoder<T: Real>(d: &ModelDenoiser<T>) -> ParamStore<T> {
    let mut ps = ParamStore::new();
    for (name, t) in d.params.iter().filter(|(n, _)| n.starts_with("ibp.")) {
        ps.insert(name.clone(), t.shape(), t.to_f64_vec().into_iter().map(T::lit).collect())
            .expect("bound tensors have consistent shapes");
    }
    ps
}

pub fn sample<T: Real>(cfg: &RunConfig, ckpt: &Path) -> Result<()> {
    let sc = &cfg.sample;
    if sc.views == 0 || sc.n == 0 {
        bail!("sample: need at least one scene and one view");
    }
    let params = load_model::<T>(cfg, ckpt)?;
    let (v_min, v_max) = (cfg.train.cfg.v_min, cfg.train.cfg.v_max);
    if sc.views < v_min || sc.views > v_max {
        log::warn!("sampling {} views; training used {v_min} to {v_max}", sc.views);
    }
    let schedule = cfg.noise_schedule()?;
    let denoiser = ModelDenoiser::new(&cfg.model, &params)?;
    create_dir(&sc.out)?;
    write_run_info(&sc.out, cfg, "sample")?;
    for i in 0..sc.n {
        let seed = mix_seed(&[cfg.seed, i as u64, 0x5a3]);
        let (_, orbit) = scenegen::scene_rig(seed, 0, sc.views, cfg.data.width, cfg.data.height)?;
        let mut world = orbit.world_poses()?;
        let poses = relative_poses(&world, 0)?;
        world.truncate(1);
        world.extend(orbit.interleaved_poses(sc.heldout)?);
        let extra = relative_poses(&world, 0)?.split_off(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let req = SampleRequest {
            poses: &poses,
            cond: None,
            steps: sc.ddim_steps,
            class: (cfg.model.encoder.classes > 0).then_some(sc.class),
            global_seed: cfg.seed,
            scene_id: seed,
        };
        let out = ddim_sample(&denoiser, &schedule, &req, &mut rng)?;
        let dir = sc.out.join(format!("sample_{i:03}"));
        write_sample(&dir, cfg, &denoiser, &out, &extra)?;
        log::info!("wrote {}", dir.display());
    }
    Ok(())
}

pub fn reconstruct<T: Real>(cfg: &RunConfig, ckpt: &Path, input: &Path) -> Result<()> {
    let rc = &cfg.reconstruct;
    if rc.cond == 0 || rc.noisy == 0 || rc.samples == 0 {
        bail!("reconstruct: need at least one conditioning view, one noisy view and one sample");
    }
    let total = rc.cond + rc.noisy;
    let mut poses = Vec::with_capacity(total);
    let mut truth = Vec::with_capacity(total);
    for v in 0..total {
        poses.push(read_pose(&view_path(input, v, "pose.txt"))?);
        let img = view_path(input, v, "ppm");
        if v < rc.cond || img.exists() {
            truth.push(read_ppm(&img)?);
        }
    }
    let depth_truth: Option<Vec<(ScalarMap, Vec<bool>)>> = (0..total)
        .map(|v| {
            let d = read_pfm(&view_path(input, v, "depth.pfm")).ok()?;
            let m = read_pgm(&view_path(input, v, "mask.pgm")).ok()?;
            Some((d, m.data.iter().map(|&x| x > 0.5).collect()))
        })
        .collect();
    let params = load_model::<T>(cfg, ckpt)?;
    let schedule = cfg.noise_schedule()?;
    let denoiser = ModelDenoiser::new(&cfg.model, &params)?;
    let cond = Conditioning {
        images: truth[..rc.cond].to_vec(),
        poses: poses[..rc.cond].to_vec(),
    };
    create_dir(&rc.out)?;
    write_run_info(&rc.out, cfg, "reconstruct")?;
    let scene_id = mix_seed(&[cfg.seed, 0x4ec]);
    let mut metrics = Vec::with_capacity(rc.samples);
    for k in 0..rc.samples {
        let seed = mix_seed(&[cfg.seed, scene_id, k as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let req = SampleRequest {
            poses: &poses[rc.cond..],
            cond: Some(&cond),
            steps: rc.ddim_steps,
            class: None,
            global_seed: seed,
            scene_id,
        };
        let out = ddim_sample(&denoiser, &schedule, &req, &mut rng)?;
        let dir = rc.out.join(format!("sample_{k:03}"));
        let (images, depths) = write_sample(&dir, cfg, &denoiser, &out, &[])?;
        let mut m = Metrics::default();
        if truth.len() == total {
            let (p, s) = evaluation::view_metrics(&images, &truth)?;
            m.psnr_d = p;
            m.ssim_d = s;
        } else {
            let (p, s) = evaluation::view_metrics(&images[..rc.cond], &truth[..rc.cond])?;
            m.psnr_d = p;
            m.ssim_d = s;
        }
        if let (Some(dt), false) = (&depth_truth, depths.is_empty()) {
            m.drc_d = evaluation::depth_metric(&depths, dt)?;
        }
        metrics.push(m);
        log::info!("wrote {}", dir.display());
    }
    write_text(&rc.out.join("metrics.csv"), &metrics_csv(&metrics, truth.len() == total, &cfg.hash))?;
    Ok(())
}

fn metrics_csv(samples: &[Metrics], full_truth: bool, hash: &str) -> String {
    let names = &METRIC_NAMES[..3];
    let mut s = format!("sample,views_scored,{},config_hash\n", names.join(","));
    let scored = if full_truth { "all" } else { "conditioning" };
    let fmt = |m: &Metrics| {
        m.values()[..3]
            .iter()
            .map(|v| v.map(|x| format!("{x:.6}")).unwrap_or_default())
            .collect::<Vec<_>>()
            .join(",")
    };
    for (k, m) in samples.iter().enumerate() {
        s.push_str(&format!("{k},{scored},{},{hash}\n", fmt(m)));
    }
    s.push_str(&format!("best_per_metric,{scored},{},{hash}\n", fmt(&best_per_metric(samples))));
    if let Some(b) = best_by_psnr(samples) {
        s.push_str(&format!("best_by_psnr,{scored},{},{hash}\n", fmt(&b)));
    }
    s
}

/// Pose files given directly or as directories of `*.pose.txt`.
fn collect_poses(args: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for a in args {
        if a.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(a)
                .with_context(|| format!("reading {}", a.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(".pose.txt")))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(a.clone());
        }
    }
    if out.is_empty() {
        bail!("render: no pose files given");
    }
    Ok(out)
}

pub fn render<T: Real>(cfg: &RunConfig, scene: &Path, pose_args: &[PathBuf]) -> Result<()> {
    let stored = scenefile::load::<T>(scene)?;
    let files = collect_poses(pose_args)?;
    let scale = cfg.render.scale;
    if scale == 0 {
        bail!("render: scale must be positive");
    }
    let mut mcfg = cfg.model.clone();
    mcfg.ablations = stored.ablations;
    let (_, rcfg) = mcfg.effective();
    let params = stored.decoder.bind(None)?;
    let out = &cfg.render.out;
    create_dir(out)?;
    write_run_info(out, cfg, "render")?;
    for (i, f) in files.iter().enumerate() {
        let mut pose = read_pose(f)?;
        if scale != 1 {
            pose = pose.resized(pose.width * scale, pose.height * scale);
        }
        let r = render_image(
            &stored.scene,
            &params,
            &pose,
            None,
            stored.key.pixel(i),
            &rcfg,
            Background::Fixed(EVAL_BACKGROUND),
        )?;
        let p = |suffix: &str| out.join(format!("view_{i:03}.{suffix}"));
        write_ppm(&p("ppm"), &r.image)?;
        write_pfm(&p("depth.pfm"), &r.depth)?;
        write_pose(&p("pose.txt"), &pose)?;
    }
    Ok(())
}

pub fn evaluate<T: Real>(cfg: &RunConfig, ckpt: &Path) -> Result<()> {
    let ec = &cfg.eval;
    let mut scenes = load_dataset(&cfg.data.dir, Some(ec.split))
        .with_context(|| format!("loading {} split from {}", ec.split.as_str(), cfg.data.dir.display()))?;
    if scenes.is_empty() {
        bail!("{}: no {} scenes", cfg.data.dir.display(), ec.split.as_str());
    }
    if ec.max_scenes > 0 {
        scenes.truncate(ec.max_scenes);
    }
    let params = load_model::<T>(cfg, ckpt)?;
    let schedule = cfg.noise_schedule()?;
    let rows = scenes
        .par_iter()
        .map(|s| evaluation::evaluate_scene(&cfg.model, &params, &schedule, &cfg.data.dir, s, &ec.protocol))
        .collect::<gibr_core::Result<Vec<_>>>()?;
    let report = EvalReport {
        rows,
        protocol: ec.protocol.clone(),
        config_hash: cfg.hash.clone(),
    };
    create_dir(&ec.out)?;
    write_text(&ec.out.join("report.csv"), &report.to_csv())?;
    let summary = report.summary();
    write_text(&ec.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}
