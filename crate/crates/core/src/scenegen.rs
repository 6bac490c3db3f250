//! Procedural scenes of spheres and boxes with an exact ray-traced oracle.
//!
//! World space is y-up. Primitives sit inside `[-1, 1]^3` on a finite
//! ground square at `y = -1`. Shading is Lambertian under one fixed
//! directional light plus ambient, with no shadows, so every pixel colour
//! and depth follows in closed form from the closest hit.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Vector3, Matrix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{read_pose, relative_poses, write_pose, CameraPose, Ray};
use crate::io::{read_ppm, read_pfm, read_pgm, write_pfm, write_pgm, write_ppm, Image, ScalarMap};
use crate::renderer::mix_seed;

pub const N_CLASSES: usize = 3;
pub const GROUND_Y: f64 = -1.0;
pub const GROUND_HALF_EXTENT: f64 = 2.0;
const AMBIENT: f64 = 0.35;
const HIT_EPS: f64 = 1e-9;
/// Horizontal field of view of the orbit cameras.
const FOV_X: f64 = 50.0 * PI / 180.0;

fn light_dir() -> Vector3<f64> {
    Vector3::new(0.4, 1.0, 0.3).normalize()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Sphere { center: Vector3<f64>, radius: f64, albedo: [f64; 3] },
    Cuboid { min: Vector3<f64>, max: Vector3<f64>, albedo: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParametricScene {
    pub primitives: Vec<Primitive>,
    pub ground_albedo: [f64; 3],
    pub background: [f64; 3],
    pub class: usize,
    pub seed: u64,
}

/// Closest intersection along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub normal: Vector3<f64>,
    pub albedo: [f64; 3],
}

impl Primitive {
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        match self {
            Primitive::Sphere { center, radius, albedo } => {
                let oc = o - center;
                let b = oc.dot(d);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t = if -b - s > HIT_EPS { -b - s } else { -b + s };
                (t > HIT_EPS).then(|| Hit {
                    t,
                    normal: (o + d * t - center) / *radius,
                    albedo: *albedo,
                })
            }
            Primitive::Cuboid { min, max, albedo } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let (mut n0, mut n1) = (Vector3::zeros(), Vector3::zeros());
                for a in 0..3 {
                    if d[a] == 0.0 {
                        if o[a] < min[a] || o[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut ta, mut tb) = ((min[a] - o[a]) / d[a], (max[a] - o[a]) / d[a]);
                    let mut na = Vector3::zeros();
                    na[a] = -1.0;
                    let mut nb = -na;
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                        std::mem::swap(&mut na, &mut nb);
                    }
                    if ta > t0 {
                        t0 = ta;
                        n0 = na;
                    }
                    if tb < t1 {
                        t1 = tb;
                        n1 = nb;
                    }
                }
                if t0 > t1 {
                    return None;
                }
                if t0 > HIT_EPS {
                    Some(Hit { t: t0, normal: n0, albedo: *albedo })
                } else if t1 > HIT_EPS {
                    Some(Hit { t: t1, normal: n1, albedo: *albedo })
                } else {
                    None
                }
            }
        }
    }

    fn center(&self) -> Vector3<f64> {
        match self {
            Primitive::Sphere { center, .. } => *center,
            Primitive::Cuboid { min, max, .. } => (min + max) / 2.0,
        }
    }
}

fn ground_hit(o: &Vector3<f64>, d: &Vector3<f64>, albedo: [f64; 3]) -> Option<Hit> {
    if d.y == 0.0 {
        return None;
    }
    let t = (GROUND_Y - o.y) / d.y;
    let p = o + d * t;
    (t > HIT_EPS && p.x.abs() <= GROUND_HALF_EXTENT && p.z.abs() <= GROUND_HALF_EXTENT).then(|| Hit {
        t,
        normal: Vector3::new(0.0, if o.y > GROUND_Y { 1.0 } else { -1.0 }, 0.0),
        albedo,
    })
}

fn albedo(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random_range(0.15..0.95), rng.random_range(0.15..0.95), rng.random_range(0.15..0.95)]
}

fn random_primitive(rng: &mut ChaCha8Rng) -> Primitive {
    let x = rng.random_range(-0.6..0.6);
    let z = rng.random_range(-0.6..0.6);
    if rng.random_bool(0.5) {
        let radius = rng.random_range(0.15..0.45);
        Primitive::Sphere {
            center: Vector3::new(x, GROUND_Y + radius, z),
            radius,
            albedo: albedo(rng),
        }
    } else {
        let h = Vector3::new(rng.random_range(0.12..0.4), rng.random_range(0.12..0.4), rng.random_range(0.12..0.4));
        let c = Vector3::new(x, GROUND_Y + h.y, z);
        Primitive::Cuboid { min: c - h, max: c + h, albedo: albedo(rng) }
    }
}

/// Deterministic scene for `seed`. Class 0 is one sphere, class 1 a stack
/// of two or three boxes, class 2 a loose mix of one to four primitives.
pub fn make_scene(seed: u64, class: usize) -> Result<ParametricScene> {
    if class >= N_CLASSES {
        return Err(Error::arg("make_scene", format!("class {class} out of {N_CLASSES}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x5ce9e]));
    let mut primitives = Vec::new();
    match class {
        0 => {
            let radius = rng.random_range(0.4..0.9);
            let s = 0.5 * (1.0 - radius);
            primitives.push(Primitive::Sphere {
                center: Vector3::new(rng.random_range(-s..=s), GROUND_Y + radius, rng.random_range(-s..=s)),
                radius,
                albedo: albedo(&mut rng),
            });
        }
        1 => {
            let n = rng.random_range(2..=3);
            let mut y = GROUND_Y;
            for _ in 0..n {
                let h = Vector3::new(rng.random_range(0.2..0.5), rng.random_range(0.15..0.3), rng.random_range(0.2..0.5));
                let c = Vector3::new(rng.random_range(-0.15..0.15), y + h.y, rng.random_range(-0.15..0.15));
                primitives.push(Primitive::Cuboid { min: c - h, max: c + h, albedo: albedo(&mut rng) });
                y += 2.0 * h.y;
            }
        }
        _ => {
            let n = rng.random_range(1..=4);
            primitives.extend((0..n).map(|_| random_primitive(&mut rng)));
        }
    }
    let g = rng.random_range(0.35..0.65);
    Ok(ParametricScene {
        primitives,
        ground_albedo: [g, g, g * 0.9],
        background: [rng.random_range(0.55..0.9), rng.random_range(0.6..0.9), rng.random_range(0.7..0.95)],
        class,
        seed,
    })
}

impl ParametricScene {
    pub fn centroid(&self) -> Vector3<f64> {
        if self.primitives.is_empty() {
            return Vector3::new(0.0, GROUND_Y, 0.0);
        }
        self.primitives.iter().map(Primitive::center).sum::<Vector3<f64>>() / self.primitives.len() as f64
    }

    /// Closest hit over every primitive and the ground.
    pub fn trace(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        self.primitives
            .iter()
            .filter_map(|p| p.intersect(o, d))
            .chain(ground_hit(o, d, self.ground_albedo))
            .min_by(|a, b| a.t.total_cmp(&b.t))
    }

    pub fn shade(&self, hit: &Hit) -> [f64; 3] {
        let k = AMBIENT + (1.0 - AMBIENT) * hit.normal.dot(&light_dir()).max(0.0);
        hit.albedo.map(|a| (a * k).clamp(0.0, 1.0))
    }

    pub fn radiance(&self, ray: &Ray) -> ([f64; 3], f64) {
        match self.trace(&ray.origin, &ray.direction) {
            Some(h) => (self.shade(&h), h.t),
            None => (self.background, f64::INFINITY),
        }
    }
}

/// Oracle view: colour and ray-distance depth, `+inf` where nothing is hit.
pub fn oracle_render(scene: &ParametricScene, pose: &CameraPose) -> Result<(Image, ScalarMap)> {
    let (w, h) = (pose.width, pose.height);
    let rows: Vec<Vec<([f64; 3], f64)>> = (0..h)
        .into_par_iter()
        .map(|r| (0..w).map(|c| pose.ray_for_pixel(r, c).map(|ray| scene.radiance(&ray))).collect())
        .collect::<Result<_>>()?;
    let mut img = Vec::with_capacity(w * h * 3);
    let mut depth = Vec::with_capacity(w * h);
    for (rgb, d) in rows.into_iter().flatten() {
        img.extend(rgb);
        depth.push(d);
    }
    Ok((Image::new(w, h, img)?, ScalarMap::new(w, h, depth)?))
}

/// Camera ring around the scene. Azimuths are evenly spaced with jitter;
/// radius and height vary per camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Orbit {
    pub target: Vector3<f64>,
    pub azimuths: Vec<f64>,
    pub radii: Vec<f64>,
    pub heights: Vec<f64>,
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

impl Orbit {
    pub fn new(scene: &ParametricScene, views: usize, width: usize, height: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if views == 0 || width == 0 || height == 0 {
            return Err(Error::arg("orbit", "need at least one view of positive size"));
        }
        let phase = rng.random_range(0.0..2.0 * PI);
        let step = 2.0 * PI / views as f64;
        let mut azimuths = Vec::with_capacity(views);
        let mut radii = Vec::with_capacity(views);
        let mut heights = Vec::with_capacity(views);
        for k in 0..views {
            azimuths.push(phase + step * k as f64 + rng.random_range(-0.15..0.15) * step);
            radii.push(rng.random_range(3.0..3.6));
            heights.push(rng.random_range(0.6..1.6));
        }
        Ok(Orbit {
            target: scene.centroid(),
            azimuths,
            radii,
            heights,
            focal: 0.5 * width as f64 / (FOV_X / 2.0).tan(),
            width,
            height,
        })
    }

    fn pose_at(&self, az: f64, radius: f64, height: f64) -> Result<CameraPose> {
        let eye = self.target + Vector3::new(radius * az.cos(), height, radius * az.sin());
        let k = Matrix3::new(
            self.focal, 0.0, self.width as f64 / 2.0,
            0.0, self.focal, self.height as f64 / 2.0,
            0.0, 0.0, 1.0,
        );
        CameraPose::look_at(eye, self.target, Vector3::y(), k, self.width, self.height)
    }

    /// World-frame poses of the ring.
    pub fn world_poses(&self) -> Result<Vec<CameraPose>> {
        (0..self.azimuths.len())
            .map(|k| self.pose_at(self.azimuths[k], self.radii[k], self.heights[k]))
            .collect()
    }

    /// Poses halfway between consecutive ring cameras, for the first
    /// `count` gaps.
    pub fn interleaved_poses(&self, count: usize) -> Result<Vec<CameraPose>> {
        let n = self.azimuths.len();
        let step = 2.0 * PI / n as f64;
        (0..count)
            .map(|k| {
                let a = k % n;
                let b = (a + 1) % n;
                let az = if n == 1 { self.azimuths[0] + PI } else { self.azimuths[a] + 0.5 * step };
                self.pose_at(az, 0.5 * (self.radii[a] + self.radii[b]), 0.5 * (self.heights[a] + self.heights[b]))
            })
            .collect()
    }
}

/// `views` orbit poses relative to the first one.
pub fn orbit_poses(scene: &ParametricScene, views: usize, width: usize, height: usize, rng: &mut ChaCha8Rng) -> Result<Vec<CameraPose>> {
    relative_poses(&Orbit::new(scene, views, width, height, rng)?.world_poses()?, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub class: usize,
    pub split: Split,
}

/// 90/5/5 over names in lexicographic order.
pub fn assign_splits(names: &[String]) -> Vec<Split> {
    let n = names.len();
    let n_val = (n as f64 * 0.05).round() as usize;
    let n_test = (n as f64 * 0.05).round() as usize;
    let n_train = n - n_val - n_test;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| names[a].cmp(&names[b]));
    let mut out = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

pub fn scene_name(index: usize) -> String {
    format!("scene_{index:05}")
}

/// Seed and class of scene `index` in a dataset generated from `seed`.
pub fn scene_identity(seed: u64, index: usize) -> (u64, usize) {
    let s = mix_seed(&[seed, index as u64, 0xda7a]);
    (s, (s % N_CLASSES as u64) as usize)
}

/// `scene.seed` plus the orbit that regenerates a dataset scene.
pub fn scene_rig(seed: u64, class: usize, views: usize, width: usize, height: usize) -> Result<(ParametricScene, Orbit)> {
    let scene = make_scene(seed, class)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x0eb17]));
    let orbit = Orbit::new(&scene, views, width, height, &mut rng)?;
    Ok((scene, orbit))
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        let _ = writeln!(s, "{} {} {}", e.name, e.class, e.split.as_str());
    }
    s
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = |msg: &str| Error::parse(path, i + 1, msg);
        if f.len() != 3 {
            return Err(bad("expected `name class split`"));
        }
        out.push(ManifestEntry {
            name: f[0].to_string(),
            class: f[1].parse().map_err(|_| bad("bad class"))?,
            split: Split::parse(f[2]).ok_or_else(|| bad("unknown split"))?,
        });
    }
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `dir/view_NNN.suffix`.
pub fn view_path(dir: &Path, v: usize, suffix: &str) -> PathBuf {
    dir.join(format!("view_{v:03}.{suffix}"))
}

/// Writes one scene directory: views, relative poses, depths, masks, meta.
pub fn write_scene(dir: &Path, seed: u64, class: usize, views: usize, width: usize, height: usize) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (scene, orbit) = scene_rig(seed, class, views, width, height)?;
    let world = orbit.world_poses()?;
    let rel = relative_poses(&world, 0)?;
    for v in 0..views {
        let (img, depth) = oracle_render(&scene, &world[v])?;
        let mask = ScalarMap::new(width, height, depth.data.iter().map(|d| d.is_finite() as u8 as f64).collect())?;
        let finite = ScalarMap::new(width, height, depth.data.iter().map(|&d| if d.is_finite() { d } else { 0.0 }).collect())?;
        write_ppm(&view_path(dir, v, "ppm"), &img)?;
        write_pose(&view_path(dir, v, "pose.txt"), &rel[v])?;
        write_pfm(&view_path(dir, v, "depth.pfm"), &finite)?;
        write_pgm(&view_path(dir, v, "mask.pgm"), &mask)?;
    }
    write_text(
        &dir.join("meta.txt"),
        &format!("seed={seed}\nclass={class}\nV={views}\nW={width}\nH={height}\n"),
    )
}

/// Generates `n_scenes` scenes under `out_dir` and writes the manifest.
pub fn write_dataset(n_scenes: usize, views: usize, width: usize, height: usize, out_dir: &Path, seed: u64) -> Result<Vec<ManifestEntry>> {
    if n_scenes == 0 || views == 0 {
        return Err(Error::arg("write_dataset", "need at least one scene and one view"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let names: Vec<String> = (0..n_scenes).map(scene_name).collect();
    let splits = assign_splits(&names);
    (0..n_scenes).into_par_iter().try_for_each(|i| {
        let (s, class) = scene_identity(seed, i);
        write_scene(&out_dir.join(&names[i]), s, class, views, width, height)
    })?;
    let entries: Vec<ManifestEntry> = (0..n_scenes)
        .map(|i| ManifestEntry {
            name: names[i].clone(),
            class: scene_identity(seed, i).1,
            split: splits[i],
        })
        .collect();
    write_text(&out_dir.join("manifest.txt"), &format_manifest(&entries))?;
    Ok(entries)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneMeta {
    pub seed: u64,
    pub class: usize,
    pub views: usize,
    pub width: usize,
    pub height: usize,
}

pub fn parse_meta(text: &str, path: &Path) -> Result<SceneMeta> {
    let mut kv = std::collections::BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::parse(path, i + 1, "expected key=value"))?;
        let v: u64 = v.trim().parse().map_err(|_| Error::parse(path, i + 1, "expected an integer"))?;
        kv.insert(k.trim().to_string(), v);
    }
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::parse(path, 0, format!("missing {k}")));
    Ok(SceneMeta {
        seed: get("seed")?,
        class: get("class")? as usize,
        views: get("V")? as usize,
        width: get("W")? as usize,
        height: get("H")? as usize,
    })
}

/// A scene directory loaded into memory.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub name: String,
    pub class: usize,
    pub split: Split,
    pub meta: SceneMeta,
    pub images: Vec<Image>,
    pub poses: Vec<CameraPose>,
}

impl SceneData {
    /// Oracle depth and validity for view `v`.
    pub fn read_depth(&self, root: &Path, v: usize) -> Result<(ScalarMap, Vec<bool>)> {
        let dir = root.join(&self.name);
        let depth = read_pfm(&view_path(&dir, v, "depth.pfm"))?;
        let mask = read_pgm(&view_path(&dir, v, "mask.pgm"))?;
        Ok((depth, mask.data.iter().map(|&m| m > 0.5).collect()))
    }
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let path = root.join("manifest.txt");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_manifest(&text, &path)
}

pub fn load_scene(root: &Path, entry: &ManifestEntry) -> Result<SceneData> {
    let dir = root.join(&entry.name);
    let mpath = dir.join("meta.txt");
    let meta = parse_meta(&std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?, &mpath)?;
    let mut images = Vec::with_capacity(meta.views);
    let mut poses = Vec::with_capacity(meta.views);
    for v in 0..meta.views {
        images.push(read_ppm(&view_path(&dir, v, "ppm"))?);
        poses.push(read_pose(&view_path(&dir, v, "pose.txt"))?);
    }
    Ok(SceneData {
        name: entry.name.clone(),
        class: entry.class,
        split: entry.split,
        meta,
        images,
        poses,
    })
}

/// Every scene of `split` (all splits when `None`).
pub fn load_dataset(root: &Path, split: Option<Split>) -> Result<Vec<SceneData>> {
    read_manifest(root)?
        .iter()
        .filter(|e| split.is_none_or(|s| e.split == s))
        .map(|e| load_scene(root, e))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hundred_scenes_split_90_5_5() {
        let names: Vec<String> = (0..100).map(scene_name).collect();
        let s = assign_splits(&names);
        let count = |x| s.iter().filter(|&&y| y == x).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (90, 5, 5));
        assert_eq!(s[89], Split::Train);
        assert_eq!(s[90], Split::Val);
        assert_eq!(s[99], Split::Test);
    }

    #[test]
    fn sphere_behind_box() {
        let o = Vector3::new(0.0, 0.0, -5.0);
        let d = Vector3::new(0.0, 0.0, 1.0);
        let scene = ParametricScene {
            primitives: vec![
                Primitive::Sphere { center: Vector3::new(0.0, 0.0, 2.0), radius: 0.5, albedo: [1.0; 3] },
                Primitive::Cuboid {
                    min: Vector3::new(-0.5, -0.5, -0.5),
                    max: Vector3::new(0.5, 0.5, 0.5),
                    albedo: [0.5; 3],
                },
            ],
            ground_albedo: [0.5; 3],
            background: [0.0; 3],
            class: 2,
            seed: 0,
        };
        let hit = scene.trace(&o, &d).unwrap();
        assert!((hit.t - 4.5).abs() < 1e-12);
        assert_eq!(hit.normal, Vector3::new(0.0, 0.0, -1.0));
    }

    #[test]
    fn manifest_round_trip() {
        let e = vec![ManifestEntry { name: "scene_00000".into(), class: 2, split: Split::Val }];
        assert_eq!(parse_manifest(&format_manifest(&e), Path::new("m")).unwrap(), e);
        let err = parse_manifest("a 1 train\nb x train\n", Path::new("m")).unwrap_err();
        assert!(err.to_string().contains("m:2"), "{err}");
    }
}
