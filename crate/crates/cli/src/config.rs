//! Plain-text run configuration: `key = value` lines under `[section]`
//! headers, `#` comments. Keys before the first header are global.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use gibr_core::diffusion::NoiseSchedule;
use gibr_core::encoder::EncoderConfig;
use gibr_core::evaluation::Protocol;
use gibr_core::model::{Ablations, ModelConfig};
use gibr_core::renderer::RenderConfig;
use gibr_core::scenegen::Split;
use gibr_core::training::TrainConfig;
use gibr_diffcore::Precision;

pub const SEED_ENV: &str = "GIBR_SEED";

pub struct Setting {
    pub section: &'static str,
    pub key: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
}

const fn s(section: &'static str, key: &'static str, default: &'static str, doc: &'static str) -> Setting {
    Setting {
        section,
        key,
        default,
        doc,
    }
}

/// Every recognised setting with its default.
pub const SETTINGS: &[Setting] = &[
    s("", "seed", "0", "master seed; overridden by GIBR_SEED"),
    s("", "precision", "f32", "f32 or f64"),
    s("", "threads", "0", "worker threads, 0 = logical cores; 1 is bit-deterministic"),
    s("data", "dir", "data", "dataset directory"),
    s("data", "scenes", "16", "scenes written by gen-data"),
    s("data", "views", "6", "views per scene"),
    s("data", "width", "32", "image width"),
    s("data", "height", "32", "image height"),
    s("model", "base", "32", "U-Net base width"),
    s("model", "mults", "1,2,4", "width multiplier per level"),
    s("model", "attn_levels", "1,2", "levels followed by attention"),
    s("model", "blocks_per_level", "1", "residual blocks per level"),
    s("model", "heads", "4", "attention heads"),
    s("model", "groups", "8", "group-norm groups"),
    s("model", "channels", "16", "pinhole feature channels"),
    s("model", "polar_channels", "8", "polar feature channels"),
    s("model", "time_dim", "128", "timestep embedding width"),
    s("model", "classes", "0", "class table size, 0 = unconditional"),
    s("model", "dropout", "true", "representation dropout during training"),
    s("model", "polar", "true", "polar feature planes"),
    s("model", "cross_view", "true", "attention across views"),
    s("model", "three_d", "true", "render through the 3D representation"),
    s("render", "near", "0.05", "near plane"),
    s("render", "far", "13.856406460551018", "far plane"),
    s("render", "n_coarse", "32", "stratified samples per ray"),
    s("render", "n_fine", "32", "importance samples per ray"),
    s("render", "chunk", "2048", "rays per decoder call"),
    s("diffusion", "steps", "1000", "diffusion timesteps T"),
    s("diffusion", "s_lo", "-3", "sigmoid schedule start"),
    s("diffusion", "s_hi", "3", "sigmoid schedule end"),
    s("train", "out", "run", "output directory"),
    s("train", "steps", "1000", "steps per invocation"),
    s("train", "lr", "8e-5", "learning rate"),
    s("train", "beta1", "0.9", "Adam beta1"),
    s("train", "beta2", "0.999", "Adam beta2"),
    s("train", "adam_eps", "1e-8", "Adam epsilon"),
    s("train", "clip", "1.0", "gradient norm clip"),
    s("train", "batch", "2", "scenes per step"),
    s("train", "ema_decay", "0.995", "EMA decay"),
    s("train", "ray_fraction", "0.12", "fraction of pixels rendered per view"),
    s("train", "v_min", "4", "fewest views per training scene"),
    s("train", "v_max", "6", "most views per training scene"),
    s("train", "log_every", "10", "steps between progress messages, 0 = never"),
    s("train", "ckpt_every", "500", "steps between checkpoints, 0 = only at the end"),
    s("train", "val_every", "0", "steps between validation losses, 0 = never"),
    s("train", "val_scenes", "2", "validation scenes per evaluation"),
    s("sample", "out", "samples", "output directory"),
    s("sample", "n", "2", "scenes to sample"),
    s("sample", "views", "4", "views per sampled scene"),
    s("sample", "ddim_steps", "250", "DDIM steps"),
    s("sample", "heldout", "4", "extra renders between the orbit poses"),
    s("sample", "class", "0", "class label, used when classes > 0"),
    s("reconstruct", "out", "recon", "output directory"),
    s("reconstruct", "cond", "1", "leading input views used as conditioning"),
    s("reconstruct", "noisy", "3", "following input poses to generate"),
    s("reconstruct", "samples", "4", "samples K for best-of-K"),
    s("reconstruct", "ddim_steps", "50", "DDIM steps"),
    s("render", "out", "renders", "output directory"),
    s("render", "scale", "1", "resolution multiplier applied to every pose"),
    s("eval", "out", "eval", "output directory"),
    s("eval", "split", "test", "train, val or test"),
    s("eval", "n_cond", "1", "conditioning views"),
    s("eval", "views", "4", "total views in the diffusion"),
    s("eval", "samples", "4", "samples K per scene"),
    s("eval", "ddim_steps", "50", "DDIM steps"),
    s("eval", "heldout", "4", "held-out views per scene"),
    s("eval", "max_scenes", "0", "scenes to evaluate, 0 = all"),
];

fn full_key(section: &str, key: &str) -> String {
    if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    }
}

fn is_path(key: &str) -> bool {
    key == "data.dir" || key.ends_with(".out") || key == "threads"
}

/// Settings as strings, keyed `section.key`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl Default for RawConfig {
    fn default() -> Self {
        RawConfig {
            values: SETTINGS
                .iter()
                .map(|s| (full_key(s.section, s.key), s.default.to_string()))
                .collect(),
        }
    }
}

impl RawConfig {
    /// Overlays a config file onto the defaults.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = RawConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            let at = || format!("{}:{}", path.display(), i + 1);
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| anyhow!("{}: unterminated section header", at()))?;
                let name = name.trim();
                if !SETTINGS.iter().any(|s| s.section == name) {
                    bail!("{}: unknown section [{name}]", at());
                }
                section = name.to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("{}: expected `key = value`", at()))?;
            let key = full_key(&section, k.trim());
            cfg.set(&key, v.trim()).map_err(|e| anyhow!("{}: {e}", at()))?;
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RawConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("{}", p.display()))?;
                RawConfig::parse(&text, p)
            }
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.to_string();
                Ok(())
            }
            None => bail!("unknown setting `{key}`"),
        }
    }

    /// Applies a `section.key=value` override.
    pub fn assign(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| anyhow!("expected section.key=value, got `{assignment}`"))?;
        self.set(k.trim(), v.trim())
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(seed) = std::env::var(SEED_ENV) {
            seed.trim()
                .parse::<u64>()
                .map_err(|_| anyhow!("{SEED_ENV}: expected an unsigned integer, got `{seed}`"))?;
            self.set("seed", seed.trim())?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("key is in the settings table")
    }

    fn parse_as<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse().map_err(|_| anyhow!("setting `{key}`: cannot parse `{v}`"))
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            v => bail!("setting `{key}`: expected true or false, got `{v}`"),
        }
    }

    fn list(&self, key: &str) -> Result<Vec<usize>> {
        self.get(key)
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| t.parse().map_err(|_| anyhow!("setting `{key}`: bad list entry `{t}`")))
            .collect()
    }

    /// FNV-1a of every setting that can change results; paths and the
    /// thread count are left out.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (k, v) in self.values.iter().filter(|(k, _)| !is_path(k)) {
            for b in k.bytes().chain([b'=']).chain(v.bytes()).chain([b'\n']) {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        format!("{h:016x}")
    }

    /// The resolved configuration as a config file.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut sections: Vec<&str> = Vec::new();
        for s in SETTINGS {
            if !sections.contains(&s.section) {
                sections.push(s.section);
            }
        }
        for sec in sections {
            if !sec.is_empty() {
                let _ = writeln!(out, "\n[{sec}]");
            }
            for s in SETTINGS.iter().filter(|s| s.section == sec) {
                let _ = writeln!(out, "# {} (default {})", s.doc, s.default);
                let _ = writeln!(out, "{} = {}", s.key, self.get(&full_key(s.section, s.key)));
            }
        }
        out
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let precision = Precision::parse(self.get("precision"))
            .ok_or_else(|| anyhow!("setting `precision`: expected f32 or f64, got `{}`", self.get("precision")))?;
        let seed = self.parse_as("seed")?;
        let encoder = EncoderConfig {
            base: self.parse_as("model.base")?,
            mults: self.list("model.mults")?,
            attn_levels: self.list("model.attn_levels")?,
            blocks_per_level: self.parse_as("model.blocks_per_level")?,
            heads: self.parse_as("model.heads")?,
            groups: self.parse_as("model.groups")?,
            channels: self.parse_as("model.channels")?,
            polar_channels: self.parse_as("model.polar_channels")?,
            time_dim: self.parse_as("model.time_dim")?,
            classes: self.parse_as("model.classes")?,
            cross_view: true,
        };
        encoder.validate()?;
        let render = RenderConfig {
            near: self.parse_as("render.near")?,
            far: self.parse_as("render.far")?,
            n_coarse: self.parse_as("render.n_coarse")?,
            n_fine: self.parse_as("render.n_fine")?,
            use_polar: true,
            chunk: self.parse_as("render.chunk")?,
        };
        if !(render.near > 0.0 && render.far > render.near) || render.n_coarse == 0 || render.chunk == 0 {
            bail!("render settings need 0 < near < far, n_coarse > 0 and chunk > 0");
        }
        let ablations = Ablations {
            dropout: self.flag("model.dropout")?,
            polar: self.flag("model.polar")?,
            cross_view: self.flag("model.cross_view")?,
            three_d: self.flag("model.three_d")?,
        };
        let train = TrainConfig {
            lr: self.parse_as("train.lr")?,
            beta1: self.parse_as("train.beta1")?,
            beta2: self.parse_as("train.beta2")?,
            adam_eps: self.parse_as("train.adam_eps")?,
            clip: self.parse_as("train.clip")?,
            batch: self.parse_as("train.batch")?,
            ema_decay: self.parse_as("train.ema_decay")?,
            ray_fraction: self.parse_as("train.ray_fraction")?,
            v_min: self.parse_as("train.v_min")?,
            v_max: self.parse_as("train.v_max")?,
            seed,
        };
        train.validate()?;
        let split_name = self.get("eval.split");
        let split = Split::parse(split_name).ok_or_else(|| anyhow!("setting `eval.split`: unknown split `{split_name}`"))?;
        Ok(RunConfig {
            seed,
            precision,
            threads: self.parse_as("threads")?,
            hash: self.hash(),
            data: DataSection {
                dir: PathBuf::from(self.get("data.dir")),
                scenes: self.parse_as("data.scenes")?,
                views: self.parse_as("data.views")?,
                width: self.parse_as("data.width")?,
                height: self.parse_as("data.height")?,
            },
            model: ModelConfig {
                encoder,
                render,
                ablations,
            },
            schedule: (
                self.parse_as("diffusion.steps")?,
                self.parse_as("diffusion.s_lo")?,
                self.parse_as("diffusion.s_hi")?,
            ),
            train: TrainSection {
                cfg: train,
                out: PathBuf::from(self.get("train.out")),
                steps: self.parse_as("train.steps")?,
                log_every: self.parse_as("train.log_every")?,
                ckpt_every: self.parse_as("train.ckpt_every")?,
                val_every: self.parse_as("train.val_every")?,
                val_scenes: self.parse_as("train.val_scenes")?,
            },
            sample: SampleSection {
                out: PathBuf::from(self.get("sample.out")),
                n: self.parse_as("sample.n")?,
                views: self.parse_as("sample.views")?,
                ddim_steps: self.parse_as("sample.ddim_steps")?,
                heldout: self.parse_as("sample.heldout")?,
                class: self.parse_as("sample.class")?,
            },
            reconstruct: ReconstructSection {
                out: PathBuf::from(self.get("reconstruct.out")),
                cond: self.parse_as("reconstruct.cond")?,
                noisy: self.parse_as("reconstruct.noisy")?,
                samples: self.parse_as("reconstruct.samples")?,
                ddim_steps: self.parse_as("reconstruct.ddim_steps")?,
            },
            render: RenderSection {
                out: PathBuf::from(self.get("render.out")),
                scale: self.parse_as("render.scale")?,
            },
            eval: EvalSection {
                out: PathBuf::from(self.get("eval.out")),
                split,
                protocol: Protocol {
                    n_cond: self.parse_as("eval.n_cond")?,
                    views: self.parse_as("eval.views")?,
                    samples: self.parse_as("eval.samples")?,
                    ddim_steps: self.parse_as("eval.ddim_steps")?,
                    heldout: self.parse_as("eval.heldout")?,
                    seed,
                },
                max_scenes: self.parse_as("eval.max_scenes")?,
            },
        })
    }
}

#[derive(Debug, Clone)]
pub struct DataSection {
    pub dir: PathBuf,
    pub scenes: usize,
    pub views: usize,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone)]
pub struct TrainSection {
    pub cfg: TrainConfig,
    pub out: PathBuf,
    pub steps: u64,
    pub log_every: u64,
    pub ckpt_every: u64,
    pub val_every: u64,
    pub val_scenes: usize,
}

#[derive(Debug, Clone)]
pub struct SampleSection {
    pub out: PathBuf,
    pub n: usize,
    pub views: usize,
    pub ddim_steps: usize,
    pub heldout: usize,
    pub class: usize,
}

#[derive(Debug, Clone)]
pub struct ReconstructSection {
    pub out: PathBuf,
    pub cond: usize,
    pub noisy: usize,
    pub samples: usize,
    pub ddim_steps: usize,
}

#[derive(Debug, Clone)]
pub struct RenderSection {
    pub out: PathBuf,
    pub scale: usize,
}

#[derive(Debug, Clone)]
pub struct EvalSection {
    pub out: PathBuf,
    pub split: Split,
    pub protocol: Protocol,
    pub max_scenes: usize,
}

/// Typed view of a [`RawConfig`].
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub threads: usize,
    pub hash: String,
    pub data: DataSection,
    pub model: ModelConfig,
    /// `(T, s_lo, s_hi)` of the sigmoid schedule.
    pub schedule: (usize, f64, f64),
    pub train: TrainSection,
    pub sample: SampleSection,
    pub reconstruct: ReconstructSection,
    pub render: RenderSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        let (t, lo, hi) = self.schedule;
        Ok(NoiseSchedule::sigmoid(t, lo, hi)?)
    }
}
