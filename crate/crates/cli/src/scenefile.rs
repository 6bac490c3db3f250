//! Sampled scenes on disk, in the tensor checkpoint format under `scene.*`.
//!
//! The file is self-contained: besides the planes it stores the poses as
//! exact `f64` bit patterns, the render key, the ablation switches and a
//! copy of the point-decoder weights.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use gibr_core::geometry::CameraPose;
use gibr_core::ibplanes::IBPlanesScene;
use gibr_core::model::{Ablations, StepKey};
use gibr_core::training::{decode_u64, encode_u64};
use gibr_diffcore::{read_checkpoint, write_checkpoint, NamedTensor, ParamStore, Real, Tensor};
use nalgebra::{Matrix3, Matrix4};

pub const FILE_NAME: &str = "scene.ckpt";
const DECODER_PREFIX: &str = "scene.decoder.";
const POSE_WORDS: usize = 25;

pub struct StoredScene<T: Real> {
    pub scene: IBPlanesScene<T>,
    pub decoder: ParamStore<T>,
    pub key: StepKey,
    pub ablations: Ablations,
}

fn tensor_record<T: Real>(name: &str, t: &Tensor<T>) -> NamedTensor {
    NamedTensor {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        data: t.to_f64_vec().into_iter().map(|x| x as f32).collect(),
    }
}

fn words(xs: impl IntoIterator<Item = u64>) -> Vec<f32> {
    xs.into_iter().flat_map(encode_u64).collect()
}

fn pose_words(p: &CameraPose) -> Vec<u64> {
    let mut out: Vec<u64> = p.extrinsics.transpose().iter().map(|x| x.to_bits()).collect();
    out.extend(p.intrinsics.transpose().iter().map(|x| x.to_bits()));
    out
}

pub fn save<T: Real>(path: &Path, s: &StoredScene<T>) -> Result<()> {
    let v = s.scene.views();
    let mut recs = vec![
        tensor_record("scene.planes", &s.scene.planes),
        tensor_record("scene.polar", &s.scene.polar),
    ];
    let bits: Vec<u64> = s.scene.poses.iter().flat_map(pose_words).collect();
    recs.push(NamedTensor::new("scene.poses", &[v, POSE_WORDS, 4], words(bits))?);
    let sizes: Vec<f32> = s.scene.poses.iter().flat_map(|p| [p.width as f32, p.height as f32]).collect();
    recs.push(NamedTensor::new("scene.sizes", &[v, 2], sizes)?);
    recs.push(NamedTensor::new("scene.key", &[3, 4], words([s.key.global, s.key.scene, s.key.step]))?);
    let a = s.ablations;
    let flags = [a.dropout, a.polar, a.cross_view, a.three_d].map(|b| b as u8 as f32);
    recs.push(NamedTensor::new("scene.ablations", &[4], flags.to_vec())?);
    recs.extend(s.decoder.to_named(DECODER_PREFIX));
    write_checkpoint(path, &recs).with_context(|| format!("writing {}", path.display()))
}

fn find<'a>(recs: &'a [NamedTensor], name: &str, path: &Path) -> Result<&'a NamedTensor> {
    recs.iter()
        .find(|r| r.name == name)
        .ok_or_else(|| anyhow!("{}: not a scene file (missing {name})", path.display()))
}

fn to_tensor<T: Real>(r: &NamedTensor) -> Result<Tensor<T>> {
    let data: Vec<f64> = r.data.iter().map(|&x| x as f64).collect();
    Ok(Tensor::from_f64(&r.shape, &data)?)
}

/// Accepts the file itself or a directory holding [`FILE_NAME`].
pub fn load<T: Real>(path: &Path) -> Result<StoredScene<T>> {
    let file = if path.is_dir() { path.join(FILE_NAME) } else { path.to_path_buf() };
    if !file.exists() {
        bail!("{}: scene file not found", file.display());
    }
    let recs = read_checkpoint(&file).with_context(|| format!("reading {}", file.display()))?;
    let planes = to_tensor::<T>(find(&recs, "scene.planes", &file)?)?;
    let polar = to_tensor::<T>(find(&recs, "scene.polar", &file)?)?;
    let pose_rec = find(&recs, "scene.poses", &file)?;
    let sizes = &find(&recs, "scene.sizes", &file)?.data;
    let v = pose_rec.shape.first().copied().unwrap_or(0);
    if pose_rec.shape != [v, POSE_WORDS, 4] || sizes.len() != 2 * v {
        bail!("{}: malformed pose records", file.display());
    }
    let mut poses = Vec::with_capacity(v);
    for (i, chunk) in pose_rec.data.chunks(POSE_WORDS * 4).enumerate() {
        let vals: Vec<f64> = chunk.chunks(4).map(|c| f64::from_bits(decode_u64(c))).collect();
        let e = Matrix4::from_row_slice(&vals[..16]);
        let k = Matrix3::from_row_slice(&vals[16..]);
        let pose = CameraPose::new(e, k, sizes[2 * i] as usize, sizes[2 * i + 1] as usize)
            .with_context(|| format!("{}: pose {i}", file.display()))?;
        poses.push(pose);
    }
    let key = &find(&recs, "scene.key", &file)?.data;
    let flags = &find(&recs, "scene.ablations", &file)?.data;
    if key.len() != 12 || flags.len() != 4 {
        bail!("{}: malformed scene header", file.display());
    }
    let decoder = ParamStore::from_named(&recs, DECODER_PREFIX);
    Ok(StoredScene {
        scene: IBPlanesScene::new(planes, polar, poses)?,
        decoder,
        key: StepKey {
            global: decode_u64(&key[0..4]),
            scene: decode_u64(&key[4..8]),
            step: decode_u64(&key[8..12]),
        },
        ablations: Ablations {
            dropout: flags[0] != 0.0,
            polar: flags[1] != 0.0,
            cross_view: flags[2] != 0.0,
            three_d: flags[3] != 0.0,
        },
    })
}
