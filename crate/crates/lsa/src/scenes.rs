//! Deterministic synthetic scene generator: colored rigid shapes moving
//! over a scrolling background, with exact per-frame bounding boxes. The
//! object class is encoded in the dominant color channel and the linear
//! velocity is a function of the class, so both placement and motion are
//! predictable from the first frame.

use std::path::Path;

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clip::{save_clip, BBox, BoxTrack, VideoClip};
use crate::error::{LsaError, Result};

pub const MANIFEST_VERSION: u32 = 1;

/// Class table: name, fill color (RGB in [0,1]), and linear velocity
/// (px/frame). High-contrast colors keep the oracle detector near-perfect;
/// class-determined velocities make motion learnable from frame 0.
pub const CLASSES: [(&str, [f64; 3], (f64, f64)); 3] = [
    ("car", [0.95, 0.10, 0.10], (2.0, 0.0)),
    ("bus", [0.10, 0.95, 0.10], (-2.0, 0.0)),
    ("truck", [0.10, 0.10, 0.95], (1.0, 1.0)),
];

pub fn class_velocity(class_label: &str) -> Option<(f64, f64)> {
    CLASSES
        .iter()
        .find(|(name, _, _)| *name == class_label)
        .map(|(_, _, v)| *v)
}

pub fn class_names() -> Vec<String> {
    CLASSES.iter().map(|(n, _, _)| n.to_string()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionModel {
    Linear,
    Turning,
    StopAndGo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Background {
    Gradient,
    Texture,
    StaticNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub num_objects: usize,
    pub motion_model: MotionModel,
    /// min/max object side length in pixels
    pub object_size_range: (f64, f64),
    pub background: Background,
    /// horizontal background scroll in px/frame
    pub ego_motion: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        let (lo, hi) = self.object_size_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(LsaError::invalid(
                "SceneSpec",
                format!("object_size_range ({lo}, {hi})"),
            ));
        }
        if hi > h as f64 || hi > w as f64 {
            return Err(LsaError::invalid(
                "SceneSpec",
                format!("objects up to {hi} px do not fit a {w}x{h} frame"),
            ));
        }
        Ok(())
    }
}

struct ObjectState {
    class: usize,
    half_w: f64,
    half_h: f64,
    cx0: f64,
    cy0: f64,
    /// turning model only: initial heading
    theta0: f64,
    speed: f64,
}

impl ObjectState {
    /// Closed-form center at frame t (sub-pixel, before rasterization).
    fn center(&self, t: f64, model: MotionModel) -> (f64, f64) {
        let (vx, vy) = CLASSES[self.class].2;
        match model {
            MotionModel::Linear => (self.cx0 + vx * t, self.cy0 + vy * t),
            MotionModel::Turning => {
                // constant angular rate omega; integral of speed*(cos,sin)
                let omega = 0.15;
                let th = self.theta0 + omega * t;
                let cx = self.cx0 + self.speed / omega * (th.sin() - self.theta0.sin());
                let cy = self.cy0 - self.speed / omega * (th.cos() - self.theta0.cos());
                (cx, cy)
            }
            MotionModel::StopAndGo => {
                // moves for the first half of the clip, then parks
                let tm = t.min(self.stop_time());
                (self.cx0 + vx * tm, self.cy0 + vy * tm)
            }
        }
    }

    fn stop_time(&self) -> f64 {
        4.0
    }

    fn rect_at(&self, t: f64, model: MotionModel) -> (f64, f64, f64, f64) {
        let (cx, cy) = self.center(t, model);
        (cx - self.half_w, cy - self.half_h, cx + self.half_w, cy + self.half_h)
    }
}

fn background_value(bg: Background, x: f64, y: f64, noise: &[f64], w: usize, ch: usize) -> f64 {
    match bg {
        Background::Gradient => {
            let fx = (x / w as f64).rem_euclid(1.0);
            0.15 + 0.25 * fx + 0.03 * ch as f64
        }
        Background::Texture => {
            let s = ((x * std::f64::consts::TAU / 16.0).sin()
                + (y * std::f64::consts::TAU / 12.0).cos())
                / 2.0;
            0.28 + 0.12 * s + 0.02 * ch as f64
        }
        Background::StaticNoise => {
            // wrap-sample a fixed 1-D noise strip so scrolls stay consistent
            let xi = (x.floor() as i64).rem_euclid(w as i64) as usize;
            let yi = y as usize;
            0.15 + 0.25 * noise[yi * w + xi] + 0.02 * ch as f64
        }
    }
}

/// Render a clip and its exact box track. Deterministic per `spec.seed`.
pub fn generate_clip(
    spec: &SceneSpec,
    n: usize,
    h: usize,
    w: usize,
) -> Result<(VideoClip, BoxTrack)> {
    spec.validate(h, w)?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);

    // background noise strip (used by StaticNoise only, always drawn so the
    // rng stream does not depend on the background kind)
    let noise: Vec<f64> = (0..h * w).map(|_| rng.gen::<f64>()).collect();

    // sample objects; rejection-sample initial placement so each object is
    // at least partially visible for >= n/2 frames
    let (lo, hi) = spec.object_size_range;
    let mut objects = Vec::with_capacity(spec.num_objects);
    for oi in 0..spec.num_objects {
        let mut placed = false;
        for _ in 0..200 {
            let class = rng.gen_range(0..CLASSES.len());
            let side_w = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            let side_h = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            let obj = ObjectState {
                class,
                half_w: side_w / 2.0,
                half_h: side_h / 2.0,
                cx0: rng.gen_range(0.0..w as f64),
                cy0: rng.gen_range(side_h / 2.0..(h as f64 - side_h / 2.0).max(side_h / 2.0 + 0.1)),
                theta0: rng.gen_range(0.0..std::f64::consts::TAU),
                speed: CLASSES[class].2 .0.abs().max(1.0),
            };
            let visible = (0..n)
                .filter(|&t| {
                    let (x0, y0, x1, y1) = obj.rect_at(t as f64, spec.motion_model);
                    x1 > 0.0 && x0 < w as f64 && y1 > 0.0 && y0 < h as f64
                })
                .count();
            if visible * 2 >= n {
                objects.push(obj);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(LsaError::invalid(
                "generate_clip",
                format!("could not place object {oi} with >= N/2 visible frames"),
            ));
        }
    }

    let mut frames = Array4::zeros((n, 3, h, w));
    let mut box_frames = Vec::with_capacity(n);
    for t in 0..n {
        let scroll = spec.ego_motion * t as f64;
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    frames[[t, ch, y, x]] = background_value(
                        spec.background,
                        x as f64 + scroll,
                        y as f64,
                        &noise,
                        w,
                        ch,
                    );
                }
            }
        }
        let mut boxes = Vec::new();
        for (oi, obj) in objects.iter().enumerate() {
            let (x0, y0, x1, y1) = obj.rect_at(t as f64, spec.motion_model);
            let color = CLASSES[obj.class].1;
            // paint pixels whose centers fall inside the continuous rect,
            // then take the exact raster extent as the box
            let (mut bx0, mut by0) = (usize::MAX, usize::MAX);
            let (mut bx1, mut by1) = (0usize, 0usize);
            let ylo = y0.floor().max(0.0) as usize;
            let yhi = (y1.ceil().min(h as f64) as usize).min(h);
            let xlo = x0.floor().max(0.0) as usize;
            let xhi = (x1.ceil().min(w as f64) as usize).min(w);
            for y in ylo..yhi {
                for x in xlo..xhi {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    if px > x0 && px < x1 && py > y0 && py < y1 {
                        for ch in 0..3 {
                            frames[[t, ch, y, x]] = color[ch];
                        }
                        bx0 = bx0.min(x);
                        by0 = by0.min(y);
                        bx1 = bx1.max(x + 1);
                        by1 = by1.max(y + 1);
                    }
                }
            }
            if bx0 != usize::MAX {
                boxes.push(BBox {
                    x_min: bx0 as f64,
                    y_min: by0 as f64,
                    x_max: bx1 as f64,
                    y_max: by1 as f64,
                    class_label: CLASSES[obj.class].0.to_string(),
                    object_id: oi as u32,
                });
            }
        }
        box_frames.push(boxes);
    }

    // snap to the 8-bit grid so PNG round-trips are exact
    frames.mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
    let clip = VideoClip::new(frames, 7, format!("scene-{}", spec.seed))?;
    let boxes = BoxTrack { frames: box_frames };
    boxes.validate(n, w as f64, h as f64)?;
    Ok((clip, boxes))
}

// ---------------------------------------------------------------------------
// dataset generation

/// Ranges the per-clip scene specs are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecDistribution {
    pub num_objects_range: (usize, usize),
    pub motion_models: Vec<MotionModel>,
    pub object_size_range: (f64, f64),
    pub backgrounds: Vec<Background>,
    pub ego_motion_range: (f64, f64),
}

impl Default for SpecDistribution {
    fn default() -> Self {
        Self {
            num_objects_range: (1, 2),
            motion_models: vec![MotionModel::Linear],
            object_size_range: (10.0, 20.0),
            backgrounds: vec![Background::Gradient, Background::Texture],
            ego_motion_range: (0.0, 1.0),
        }
    }
}

impl SpecDistribution {
    pub fn sample(&self, rng: &mut ChaCha12Rng, clip_seed: u64) -> SceneSpec {
        let (nlo, nhi) = self.num_objects_range;
        let (elo, ehi) = self.ego_motion_range;
        SceneSpec {
            num_objects: rng.gen_range(nlo..=nhi),
            motion_model: self.motion_models[rng.gen_range(0..self.motion_models.len())],
            object_size_range: self.object_size_range,
            background: self.backgrounds[rng.gen_range(0..self.backgrounds.len())],
            ego_motion: if ehi > elo { rng.gen_range(elo..=ehi) } else { elo },
            seed: clip_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: String,
    pub seed: u64,
    pub spec: SceneSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub clips: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serialization");
        std::fs::write(path, json).map_err(|e| LsaError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LsaError::io(path.display().to_string(), e))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| LsaError::malformed(path.display().to_string(), e.to_string()))?;
        if m.version != MANIFEST_VERSION {
            return Err(LsaError::FormatVersion {
                found: m.version,
                expected: MANIFEST_VERSION,
            });
        }
        Ok(m)
    }

    pub fn split(&self, which: &str) -> Vec<&ManifestEntry> {
        self.clips.iter().filter(|c| c.split == which).collect()
    }
}

/// Write train/test clip directories under `out_dir` plus `manifest.json`.
/// Clip ids are `train-%05d` / `test-%05d`, so the splits are disjoint by
/// construction; each clip renders from its own derived seed.
pub fn generate_dataset(
    dist: &SpecDistribution,
    train_count: usize,
    test_count: usize,
    n: usize,
    h: usize,
    w: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| LsaError::io(out_dir.display().to_string(), e))?;

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(train_count + test_count);
    for (split, count) in [("train", train_count), ("test", test_count)] {
        for i in 0..count {
            let clip_seed: u64 = rng.gen();
            let spec = dist.sample(&mut rng, clip_seed);
            entries.push(ManifestEntry {
                id: format!("{split}-{i:05}"),
                split: split.to_string(),
                seed: clip_seed,
                spec,
            });
        }
    }

    entries
        .par_iter()
        .map(|entry| -> Result<()> {
            let (mut clip, boxes) = generate_clip(&entry.spec, n, h, w)
                .map_err(|e| LsaError::Msg(format!("clip {}: {e}", entry.id)))?;
            clip.clip_id = entry.id.clone();
            save_clip(&clip, &boxes, &out_dir.join(&entry.id))
                .map_err(|e| LsaError::Msg(format!("clip {}: {e}", entry.id)))
        })
        .collect::<Result<Vec<()>>>()?;

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        num_frames: n,
        height: h,
        width: w,
        clips: entries,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Load every clip of a split listed in a manifest, in manifest order.
pub fn load_split(
    manifest: &Manifest,
    data_dir: &Path,
    which: &str,
) -> Result<Vec<(VideoClip, BoxTrack)>> {
    manifest
        .split(which)
        .par_iter()
        .map(|entry| crate::clip::load_clip(&data_dir.join(&entry.id)))
        .collect()
}
