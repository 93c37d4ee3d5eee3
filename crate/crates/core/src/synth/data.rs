//! Dataset serialization and correspondence-pair construction.
//!
//! Layout: `root/<split>/<episode_id>/view<m>_<t>.png` plus `actions.csv`,
//! `instruction.txt` and `meta.json` per episode, and a `manifest.json` at
//! the dataset root carrying (seed, counts, config hash).

use super::env::{EnvConfig, Task};
use super::expert::script_expert;
use super::render::render;
use super::{generate_scene, Scene, SceneConfig};
use crate::error::{Error, Result};
use crate::latent::ImageFrame;
use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct Episode {
    pub task: Task,
    pub seed: u64,
    pub instruction: String,
    /// `frames[t][view]`, length `actions.len() + 1`.
    pub frames: Vec<Vec<ImageFrame>>,
    pub actions: Vec<[f64; 3]>,
    pub success: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataConfig {
    pub tasks: Vec<String>,
    pub episodes_per_task: usize,
    pub seed: u64,
    pub res: usize,
    pub views: usize,
    pub step_cap: usize,
    pub n_objects: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            tasks: vec!["reach".into(), "push_to_zone".into(), "press_button".into()],
            episodes_per_task: 50,
            seed: 0,
            res: 64,
            views: 2,
            step_cap: 60,
            n_objects: 2,
        }
    }
}

impl DataConfig {
    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            res: self.res,
            views: self.views,
            step_cap: self.step_cap,
            scene: SceneConfig {
                n_objects: self.n_objects,
                object_size: SceneConfig::default().object_size,
            },
        }
    }

    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        let d: [u8; 32] = h.finalize().into();
        d.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub counts: BTreeMap<String, usize>,
    pub config_hash: String,
    pub splits: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct EpisodeMeta {
    task: String,
    seed: u64,
    success: bool,
    steps: usize,
    views: usize,
}

fn frame_to_png(frame: &ImageFrame, path: &Path) -> Result<()> {
    let (h, w, _) = frame.pixels.dim();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let px = image::Rgb([
                (frame.pixels[[i, j, 0]] * 255.0).round().clamp(0.0, 255.0) as u8,
                (frame.pixels[[i, j, 1]] * 255.0).round().clamp(0.0, 255.0) as u8,
                (frame.pixels[[i, j, 2]] * 255.0).round().clamp(0.0, 255.0) as u8,
            ]);
            img.put_pixel(j as u32, i as u32, px);
        }
    }
    img.save(path)?;
    Ok(())
}

fn png_to_frame(path: &Path, camera_id: usize) -> Result<ImageFrame> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut pixels = Array3::<f64>::zeros((h as usize, w as usize, 3));
    for i in 0..h {
        for j in 0..w {
            let p = img.get_pixel(j, i);
            for c in 0..3 {
                pixels[[i as usize, j as usize, c]] = p.0[c] as f64 / 255.0;
            }
        }
    }
    Ok(ImageFrame { pixels, camera_id })
}

pub fn save_episode(dir: &Path, ep: &Episode) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (t, views) in ep.frames.iter().enumerate() {
        for (m, frame) in views.iter().enumerate() {
            frame_to_png(frame, &dir.join(format!("view{m}_{t:03}.png")))?;
        }
    }
    let mut csv = String::new();
    for a in &ep.actions {
        csv.push_str(&format!("{},{},{}\n", a[0], a[1], a[2]));
    }
    fs::write(dir.join("actions.csv"), csv)?;
    fs::write(dir.join("instruction.txt"), &ep.instruction)?;
    let meta = EpisodeMeta {
        task: ep.task.name().to_string(),
        seed: ep.seed,
        success: ep.success,
        steps: ep.actions.len(),
        views: ep.frames[0].len(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_episode(dir: &Path) -> Result<Episode> {
    let meta: EpisodeMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let instruction = fs::read_to_string(dir.join("instruction.txt"))?;
    let mut actions = Vec::new();
    for line in fs::read_to_string(dir.join("actions.csv"))?.lines() {
        let parts: Vec<f64> = line
            .split(',')
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("bad actions.csv: {e}")))?;
        if parts.len() != 3 {
            return Err(Error::Config("actions.csv rows must have 3 fields".into()));
        }
        actions.push([parts[0], parts[1], parts[2]]);
    }
    let mut frames = Vec::with_capacity(meta.steps + 1);
    for t in 0..=meta.steps {
        let mut views = Vec::with_capacity(meta.views);
        for m in 0..meta.views {
            views.push(png_to_frame(&dir.join(format!("view{m}_{t:03}.png")), m)?);
        }
        frames.push(views);
    }
    Ok(Episode {
        task: Task::parse(&meta.task)?,
        seed: meta.seed,
        instruction,
        frames,
        actions,
        success: meta.success,
    })
}

/// Generate expert demonstrations for every configured task into
/// `root/<split>/`, retrying layouts the expert cannot solve, and write the
/// dataset manifest.
pub fn generate_dataset(root: &Path, split: &str, cfg: &DataConfig) -> Result<Manifest> {
    let env_cfg = cfg.env_config();
    let split_dir = root.join(split);
    fs::create_dir_all(&split_dir)?;
    let mut counts = BTreeMap::new();
    for task_name in &cfg.tasks {
        let task = Task::parse(task_name)?;
        let mut produced = 0usize;
        let mut attempt = 0u64;
        while produced < cfg.episodes_per_task {
            let seed = cfg
                .seed
                .wrapping_add(task_index(task) as u64 * 1_000_003)
                .wrapping_add(produced as u64 * 101)
                .wrapping_add(attempt * 7_777_777);
            match script_expert(seed, task, &env_cfg) {
                Ok(ep) => {
                    let dir = split_dir.join(format!("{}_{produced:04}", task.name()));
                    save_episode(&dir, &ep)?;
                    produced += 1;
                    attempt = 0;
                }
                Err(Error::UnsolvableLayout(_)) => {
                    attempt += 1;
                    if attempt > 64 {
                        return Err(Error::UnsolvableLayout(format!(
                            "gave up after {attempt} layouts for {}",
                            task.name()
                        )));
                    }
                }
                Err(e) => return Err(e),
            }
        }
        counts.insert(task.name().to_string(), produced);
    }
    let manifest = Manifest {
        seed: cfg.seed,
        counts,
        config_hash: cfg.config_hash(),
        splits: vec![split.to_string()],
    };
    let manifest_path = root.join("manifest.json");
    let merged = match fs::read_to_string(&manifest_path) {
        Ok(text) => {
            let mut old: Manifest = serde_json::from_str(&text)?;
            if !old.splits.contains(&split.to_string()) {
                old.splits.push(split.to_string());
            }
            old.counts = manifest.counts.clone();
            old.config_hash = manifest.config_hash.clone();
            old
        }
        Err(_) => manifest,
    };
    fs::write(&manifest_path, serde_json::to_string_pretty(&merged)?)?;
    Ok(merged)
}

fn task_index(t: Task) -> usize {
    match t {
        Task::Reach => 0,
        Task::PushToZone => 1,
        Task::PressButton => 2,
    }
}

/// Load every episode of a split, sorted by directory name.
pub fn load_dataset(root: &Path, split: &str) -> Result<Vec<Episode>> {
    let dir = root.join(split);
    if !dir.exists() {
        return Err(Error::EmptyDataset(format!(
            "missing dataset split {}",
            dir.display()
        )));
    }
    let mut names: Vec<String> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::EmptyDataset(format!("no episodes in {split}")));
    }
    names.iter().map(|n| load_episode(&dir.join(n))).collect()
}

/// A rigidly transformed view pair with exact pixel-level ground truth.
#[derive(Debug, Clone)]
pub struct CorrespondencePair {
    pub frame_a: ImageFrame,
    pub frame_b: ImageFrame,
    /// (dx_px, dy_px, dtheta_rad), applied about the frame center.
    pub transform: (f64, f64, f64),
    /// probe pixel (row, col) in `frame_a` -> float (row, col) in `frame_b`.
    pub probes: Vec<((usize, usize), (f64, f64))>,
}

fn transform_scene(scene: &Scene, dx: f64, dy: f64, theta: f64) -> Scene {
    let c = (0.5, 0.5);
    let (s, co) = theta.sin_cos();
    let mut out = scene.clone();
    for o in out.objects.iter_mut() {
        let (px, py) = (o.pos.0 - c.0, o.pos.1 - c.1);
        o.pos = (c.0 + co * px - s * py + dx, c.1 + s * px + co * py + dy);
        o.orientation += theta;
    }
    let (zx, zy) = (out.target_zone.pos.0 - c.0, out.target_zone.pos.1 - c.1);
    out.target_zone.pos = (c.0 + co * zx - s * zy + dx, c.1 + s * zx + co * zy + dy);
    out
}

fn map_pixel(res: usize, row: usize, col: usize, dx: f64, dy: f64, theta: f64) -> (f64, f64) {
    let c = 0.5;
    let px = (col as f64 + 0.5) / res as f64 - c;
    let py = (row as f64 + 0.5) / res as f64 - c;
    let (s, co) = theta.sin_cos();
    let qx = c + co * px - s * py + dx;
    let qy = c + s * px + co * py + dy;
    (qy * res as f64 - 0.5, qx * res as f64 - 0.5)
}

/// Build `n` pairs at `res`; shifts are integer pixel offsets up to
/// `max_shift_px` and rotations are uniform within `max_rot_deg`. Probes are
/// pixels strictly inside object silhouettes whose mapped location stays in
/// frame.
pub fn make_correspondence_pairs(
    n: usize,
    max_shift_px: usize,
    max_rot_deg: f64,
    probes_per_pair: usize,
    seed: u64,
    res: usize,
) -> Result<Vec<CorrespondencePair>> {
    if max_shift_px * 4 >= res {
        return Err(Error::InvalidArgument(format!(
            "max shift {max_shift_px} must stay below res/4 = {}",
            res / 4
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene_cfg = SceneConfig::default();
    let mut out = Vec::with_capacity(n);
    let mut scene_seed = seed;
    while out.len() < n {
        scene_seed = scene_seed.wrapping_add(1);
        let scene = generate_scene(scene_seed, &scene_cfg);
        let dx_px = rng.gen_range(-(max_shift_px as i64)..=max_shift_px as i64) as f64;
        let dy_px = rng.gen_range(-(max_shift_px as i64)..=max_shift_px as i64) as f64;
        let theta = if max_rot_deg > 0.0 {
            rng.gen_range(-max_rot_deg..=max_rot_deg).to_radians()
        } else {
            0.0
        };
        let (dx, dy) = (dx_px / res as f64, dy_px / res as f64);
        let moved = transform_scene(&scene, dx, dy, theta);
        let in_frame = moved.objects.iter().all(|o| {
            o.pos.0 - o.size > 0.01
                && o.pos.1 - o.size > 0.01
                && o.pos.0 + o.size < 0.99
                && o.pos.1 + o.size < 0.99
        });
        if !in_frame {
            continue;
        }
        let frame_a = render(&scene, 0, res);
        let frame_b = render(&moved, 0, res);
        // collect interior pixels
        let mut interior = Vec::new();
        for i in 0..res {
            for j in 0..res {
                let p = ((j as f64 + 0.5) / res as f64, (i as f64 + 0.5) / res as f64);
                let inside = scene.objects.iter().any(|o| {
                    let shrunk = super::SceneObject {
                        size: (o.size - 1.5 / res as f64).max(0.0),
                        ..o.clone()
                    };
                    super::render::object_contains(&shrunk, p)
                });
                if inside {
                    let mapped = map_pixel(res, i, j, dx, dy, theta);
                    if mapped.0 > 1.0
                        && mapped.0 < res as f64 - 2.0
                        && mapped.1 > 1.0
                        && mapped.1 < res as f64 - 2.0
                    {
                        interior.push(((i, j), mapped));
                    }
                }
            }
        }
        if interior.len() < probes_per_pair {
            continue;
        }
        let mut probes = Vec::with_capacity(probes_per_pair);
        for _ in 0..probes_per_pair {
            let k = rng.gen_range(0..interior.len());
            probes.push(interior[k]);
        }
        out.push(CorrespondencePair {
            frame_a,
            frame_b,
            transform: (dx_px, dy_px, theta),
            probes,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn episode_roundtrip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = EnvConfig {
            res: 32,
            views: 2,
            step_cap: 60,
            scene: SceneConfig::default(),
        };
        let ep = script_expert(4, Task::Reach, &cfg).unwrap();
        save_episode(&dir.path().join("ep0"), &ep).unwrap();
        let back = load_episode(&dir.path().join("ep0")).unwrap();
        assert_eq!(back.instruction, ep.instruction);
        assert_eq!(back.actions.len(), ep.actions.len());
        assert_eq!(back.frames.len(), ep.frames.len());
        assert!(back.success);
        // actions survive the text roundtrip exactly
        for (a, b) in ep.actions.iter().zip(back.actions.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn generate_dataset_writes_manifest_and_loads() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DataConfig {
            tasks: vec!["reach".into()],
            episodes_per_task: 3,
            seed: 11,
            res: 32,
            views: 1,
            step_cap: 60,
            n_objects: 2,
        };
        let manifest = generate_dataset(dir.path(), "train", &cfg).unwrap();
        assert_eq!(manifest.counts["reach"], 3);
        assert!(!manifest.config_hash.is_empty());
        let eps = load_dataset(dir.path(), "train").unwrap();
        assert_eq!(eps.len(), 3);
        assert!(eps.iter().all(|e| e.success));
    }

    #[test]
    fn dataset_generation_is_reproducible() {
        let cfg = DataConfig {
            tasks: vec!["reach".into()],
            episodes_per_task: 2,
            seed: 5,
            res: 32,
            views: 1,
            step_cap: 60,
            n_objects: 2,
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_dataset(d1.path(), "train", &cfg).unwrap();
        generate_dataset(d2.path(), "train", &cfg).unwrap();
        let a = fs::read(d1.path().join("train/reach_0000/view0_000.png")).unwrap();
        let b = fs::read(d2.path().join("train/reach_0000/view0_000.png")).unwrap();
        assert_eq!(a, b, "dataset bytes must reproduce from the manifest seed");
        let ma = fs::read(d1.path().join("manifest.json")).unwrap();
        let mb = fs::read(d2.path().join("manifest.json")).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn zero_transform_probes_are_identity() {
        let pairs = make_correspondence_pairs(2, 0, 0.0, 16, 3, 32).unwrap();
        for p in &pairs {
            assert_eq!(p.transform.0, 0.0);
            for ((r, c), (mr, mc)) in &p.probes {
                assert!((*r as f64 - mr).abs() < 1e-9);
                assert!((*c as f64 - mc).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pure_translation_offsets_probes_exactly() {
        let pairs = make_correspondence_pairs(4, 5, 0.0, 16, 7, 32).unwrap();
        for p in &pairs {
            let (dx, dy, _) = p.transform;
            for ((r, c), (mr, mc)) in &p.probes {
                assert!((mr - (*r as f64 + dy)).abs() < 1e-9);
                assert!((mc - (*c as f64 + dx)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rotation_probe_matches_rotation_formula() {
        let res = 64;
        let got = map_pixel(res, 10, 50, 0.0, 0.0, std::f64::consts::FRAC_PI_2);
        // hand oracle: 90 deg about center maps (x, y) -> (-y, x) in centered
        // scene coordinates
        let cx = (50.0 + 0.5) / res as f64 - 0.5;
        let cy = (10.0 + 0.5) / res as f64 - 0.5;
        let (rx, ry) = (-cy, cx);
        let want = ((ry + 0.5) * res as f64 - 0.5, (rx + 0.5) * res as f64 - 0.5);
        assert!((got.0 - want.0).abs() < 1e-9);
        assert!((got.1 - want.1).abs() < 1e-9);
    }

    #[test]
    fn inverse_transform_recovers_probe() {
        let pairs = make_correspondence_pairs(3, 4, 20.0, 8, 13, 32).unwrap();
        for p in &pairs {
            let (dx_px, dy_px, theta) = p.transform;
            let res = 32usize;
            let (dx, dy) = (dx_px / res as f64, dy_px / res as f64);
            for ((r, c), (mr, mc)) in &p.probes {
                // invert: un-translate, un-rotate about center
                let qx = (mc + 0.5) / res as f64 - dx - 0.5;
                let qy = (mr + 0.5) / res as f64 - dy - 0.5;
                let (s, co) = (-theta).sin_cos();
                let px = co * qx - s * qy + 0.5;
                let py = s * qx + co * qy + 0.5;
                let back_c = px * res as f64 - 0.5;
                let back_r = py * res as f64 - 0.5;
                assert!((back_r - *r as f64).abs() < 1e-9);
                assert!((back_c - *c as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn max_shift_guard() {
        assert!(make_correspondence_pairs(1, 8, 0.0, 4, 0, 32).is_err());
    }
}
