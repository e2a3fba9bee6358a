//! Core domain types and the on-disk clip format.
//!
//! A clip on disk is a directory holding `frames/%05d.png` (8-bit RGB,
//! lossless) plus an `annotations.json` with per-frame bounding boxes in
//! pixel coordinates at the stored resolution.

use std::fs;
use std::path::Path;

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{LsaError, Result};

/// An N-frame pixel video in `[0,1]`, shape `[N, 3, H, W]`.
#[derive(Debug, Clone)]
pub struct VideoClip {
    pub frames: Array4<f64>,
    pub fps: u32,
    pub clip_id: String,
}

impl VideoClip {
    pub fn new(frames: Array4<f64>, fps: u32, clip_id: impl Into<String>) -> Result<Self> {
        let (n, c, _h, _w) = frames.dim();
        if n < 2 {
            return Err(LsaError::invalid("VideoClip", format!("N = {n}, need N >= 2")));
        }
        if c != 3 {
            return Err(LsaError::invalid("VideoClip", format!("C = {c}, need C = 3")));
        }
        for &v in frames.iter() {
            if !v.is_finite() {
                return Err(LsaError::NonFinite("VideoClip frames".into()));
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(LsaError::invalid("VideoClip", format!("pixel {v} outside [0,1]")));
            }
        }
        Ok(Self {
            frames,
            fps,
            clip_id: clip_id.into(),
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.dim().0
    }

    pub fn height(&self) -> usize {
        self.frames.dim().2
    }

    pub fn width(&self) -> usize {
        self.frames.dim().3
    }

    /// Both spatial dims must be exact multiples of `factor` (codec
    /// downsample or feature patch size).
    pub fn check_divisibility(&self, factor: usize, what: &str) -> Result<()> {
        if factor == 0 || self.height() % factor != 0 || self.width() % factor != 0 {
            return Err(LsaError::invalid(
                "VideoClip",
                format!(
                    "dims {}x{} not divisible by {what} factor {factor}",
                    self.height(),
                    self.width()
                ),
            ));
        }
        Ok(())
    }
}

/// Axis-aligned box in pixel units, `x_min < x_max`, `y_min < y_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub class_label: String,
    pub object_id: u32,
}

impl BBox {
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    fn validate(&self, frame_w: f64, frame_h: f64, frame_idx: usize) -> Result<()> {
        let ok = self.x_min >= 0.0
            && self.x_min < self.x_max
            && self.x_max <= frame_w
            && self.y_min >= 0.0
            && self.y_min < self.y_max
            && self.y_max <= frame_h
            && [self.x_min, self.y_min, self.x_max, self.y_max]
                .iter()
                .all(|v| v.is_finite());
        if !ok {
            return Err(LsaError::invalid(
                "BBox",
                format!(
                    "frame {frame_idx}: ({}, {}, {}, {}) outside {frame_w}x{frame_h}",
                    self.x_min, self.y_min, self.x_max, self.y_max
                ),
            ));
        }
        Ok(())
    }
}

/// Per-frame lists of ground-truth boxes, aligned with the owning clip.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxTrack {
    pub frames: Vec<Vec<BBox>>,
}

impl BoxTrack {
    pub fn validate(&self, num_frames: usize, frame_w: f64, frame_h: f64) -> Result<()> {
        if self.frames.len() != num_frames {
            return Err(LsaError::invalid(
                "BoxTrack",
                format!("{} frames of boxes for a {num_frames}-frame clip", self.frames.len()),
            ));
        }
        for (i, boxes) in self.frames.iter().enumerate() {
            for b in boxes {
                b.validate(frame_w, frame_h, i)?;
            }
        }
        Ok(())
    }
}

/// N-frame latent tensor `[N, c, h, w]` carrying the noise level it was
/// produced at (0 for clean latents).
#[derive(Debug, Clone)]
pub struct LatentClip {
    pub latents: Array4<f64>,
    pub sigma: f64,
}

impl LatentClip {
    pub fn new(latents: Array4<f64>, sigma: f64) -> Result<Self> {
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(LsaError::invalid("LatentClip", format!("sigma = {sigma}")));
        }
        if latents.iter().any(|v| !v.is_finite()) {
            return Err(LsaError::NonFinite("LatentClip latents".into()));
        }
        Ok(Self { latents, sigma })
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        self.latents.dim()
    }
}

/// Per-frame patch-feature map, shape `[N, H/p, W/p, d]`.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    pub features: Array4<f64>,
    pub patch_size: usize,
    pub feature_dim: usize,
}

impl FeatureGrid {
    pub fn new(features: Array4<f64>, patch_size: usize) -> Result<Self> {
        let d = features.dim().3;
        if features.iter().any(|v| !v.is_finite()) {
            return Err(LsaError::NonFinite("FeatureGrid".into()));
        }
        Ok(Self {
            features,
            patch_size,
            feature_dim: d,
        })
    }

    /// `(N, grid_h, grid_w)`.
    pub fn grid_shape(&self) -> (usize, usize, usize) {
        let (n, gh, gw, _) = self.features.dim();
        (n, gh, gw)
    }
}

/// Per-frame patch weight grid with entries in `{1, alpha}` (or `{0, alpha}`
/// for the box-only variant), shape `[N, H/p, W/p]`.
#[derive(Debug, Clone)]
pub struct PatchMask {
    pub weights: Array3<f64>,
    pub alpha: f64,
}

impl PatchMask {
    pub fn new(weights: Array3<f64>, alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(LsaError::invalid("PatchMask", format!("alpha = {alpha}")));
        }
        for &w in weights.iter() {
            if w != 0.0 && w != 1.0 && w != alpha {
                return Err(LsaError::invalid(
                    "PatchMask",
                    format!("weight {w} not in {{0, 1, {alpha}}}"),
                ));
            }
        }
        Ok(Self { weights, alpha })
    }
}

/// Itemized training loss: `total = diffusion_weight * diffusion_loss +
/// lambda_feat * feature_loss`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub diffusion_loss: f64,
    pub feature_loss: f64,
    pub total: f64,
    pub diffusion_weight: f64,
    pub lambda_feat: f64,
}

// ---------------------------------------------------------------------------
// on-disk format

#[derive(Serialize, Deserialize)]
struct AnnotationBox {
    #[serde(rename = "box")]
    coords: [f64; 4],
    class: String,
    id: u32,
}

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    fps: u32,
    frames: Vec<Vec<AnnotationBox>>,
}

fn frame_path(dir: &Path, idx: usize) -> std::path::PathBuf {
    dir.join("frames").join(format!("{idx:05}.png"))
}

/// Write a clip directory: `frames/%05d.png` + `annotations.json`.
///
/// Pixels are stored as 8-bit samples; values already on the `k/255` grid
/// round-trip bit-exactly.
pub fn save_clip(clip: &VideoClip, boxes: &BoxTrack, dir: &Path) -> Result<()> {
    boxes.validate(clip.num_frames(), clip.width() as f64, clip.height() as f64)?;
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| LsaError::io(frames_dir.display().to_string(), e))?;

    let (n, _, h, w) = clip.frames.dim();
    for j in 0..n {
        let mut buf = vec![0u8; h * w * 3];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    buf[(y * w + x) * 3 + ch] =
                        (clip.frames[[j, ch, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        let path = frame_path(dir, j);
        image::save_buffer(&path, &buf, w as u32, h as u32, image::ColorType::Rgb8)
            .map_err(|e| LsaError::malformed(path.display().to_string(), e.to_string()))?;
    }

    let ann = AnnotationFile {
        fps: clip.fps,
        frames: boxes
            .frames
            .iter()
            .map(|fr| {
                fr.iter()
                    .map(|b| AnnotationBox {
                        coords: [b.x_min, b.y_min, b.x_max, b.y_max],
                        class: b.class_label.clone(),
                        id: b.object_id,
                    })
                    .collect()
            })
            .collect(),
    };
    let ann_path = dir.join("annotations.json");
    let json = serde_json::to_string_pretty(&ann).expect("annotation serialization");
    fs::write(&ann_path, json).map_err(|e| LsaError::io(ann_path.display().to_string(), e))?;
    Ok(())
}

/// Load a clip directory written by [`save_clip`], validating every type
/// invariant. Errors name the offending file or frame.
pub fn load_clip(dir: &Path) -> Result<(VideoClip, BoxTrack)> {
    let ann_path = dir.join("annotations.json");
    let ann_text = fs::read_to_string(&ann_path)
        .map_err(|e| LsaError::io(ann_path.display().to_string(), e))?;
    let ann: AnnotationFile = serde_json::from_str(&ann_text)
        .map_err(|e| LsaError::malformed(ann_path.display().to_string(), e.to_string()))?;

    let n = ann.frames.len();
    if n < 2 {
        return Err(LsaError::invalid(
            "clip directory",
            format!("{} annotated frames, need >= 2", n),
        ));
    }

    let mut frames: Option<Array4<f64>> = None;
    for j in 0..n {
        let path = frame_path(dir, j);
        let img = image::open(&path)
            .map_err(|e| LsaError::malformed(path.display().to_string(), e.to_string()))?
            .into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let tensor = frames.get_or_insert_with(|| Array4::zeros((n, 3, h, w)));
        if tensor.dim().2 != h || tensor.dim().3 != w {
            return Err(LsaError::shape(
                format!("frame {j} of {}", dir.display()),
                format!("{}x{}", tensor.dim().2, tensor.dim().3),
                format!("{h}x{w}"),
            ));
        }
        for y in 0..h {
            for x in 0..w {
                let px = img.get_pixel(x as u32, y as u32);
                for ch in 0..3 {
                    tensor[[j, ch, y, x]] = px.0[ch] as f64 / 255.0;
                }
            }
        }
    }
    let frames = frames.expect("n >= 2 frames loaded");
    let (_, _, h, w) = frames.dim();

    let boxes = BoxTrack {
        frames: ann
            .frames
            .iter()
            .map(|fr| {
                fr.iter()
                    .map(|b| BBox {
                        x_min: b.coords[0],
                        y_min: b.coords[1],
                        x_max: b.coords[2],
                        y_max: b.coords[3],
                        class_label: b.class.clone(),
                        object_id: b.id,
                    })
                    .collect()
            })
            .collect(),
    };

    let clip_id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "clip".into());
    let clip = VideoClip::new(frames, ann.fps, clip_id)?;
    boxes.validate(n, w as f64, h as f64)?;
    Ok((clip, boxes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn sample_clip(n: usize, h: usize, w: usize) -> VideoClip {
        let mut frames = Array4::zeros((n, 3, h, w));
        // pixels on the 8-bit grid so png round-trips exactly
        for (i, v) in frames.iter_mut().enumerate() {
            *v = ((i * 37) % 256) as f64 / 255.0;
        }
        VideoClip::new(frames, 7, "test-clip").unwrap()
    }

    fn sample_boxes(n: usize) -> BoxTrack {
        BoxTrack {
            frames: (0..n)
                .map(|j| {
                    vec![BBox {
                        x_min: j as f64,
                        y_min: 1.0,
                        x_max: j as f64 + 4.0,
                        y_max: 6.0,
                        class_label: "car".into(),
                        object_id: 3,
                    }]
                })
                .collect(),
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let clip = sample_clip(8, 16, 16);
        let boxes = sample_boxes(8);
        save_clip(&clip, &boxes, dir.path()).unwrap();
        let (clip2, boxes2) = load_clip(dir.path()).unwrap();
        assert_eq!(clip.frames, clip2.frames);
        assert_eq!(clip2.num_frames(), 8);
        assert_eq!(boxes, boxes2);
        assert_eq!(boxes2.frames[3][0].object_id, 3);
    }

    #[test]
    fn missing_annotations_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let clip = sample_clip(4, 8, 8);
        save_clip(&clip, &BoxTrack { frames: vec![vec![]; 4] }, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("annotations.json")).unwrap();
        let err = load_clip(dir.path()).unwrap_err();
        assert!(err.to_string().contains("annotations.json"));
    }

    #[test]
    fn box_outside_frame_names_the_frame() {
        let dir = tempfile::tempdir().unwrap();
        let clip = sample_clip(4, 8, 8);
        let mut boxes = BoxTrack { frames: vec![vec![]; 4] };
        boxes.frames[2].push(BBox {
            x_min: 0.0,
            y_min: 0.0,
            x_max: 9.0, // > W
            y_max: 4.0,
            class_label: "car".into(),
            object_id: 0,
        });
        let err = save_clip(&clip, &boxes, dir.path()).unwrap_err();
        assert!(err.to_string().contains("frame 2"), "{err}");
    }

    #[test]
    fn single_frame_clip_rejected() {
        let frames = Array4::zeros((1, 3, 8, 8));
        assert!(VideoClip::new(frames, 7, "x").is_err());
    }

    #[test]
    fn non_finite_pixels_rejected() {
        let mut frames = Array4::zeros((2, 3, 8, 8));
        frames[[0, 0, 0, 0]] = f64::NAN;
        assert!(VideoClip::new(frames, 7, "x").is_err());
    }

    #[test]
    fn patch_mask_rejects_off_grid_weights() {
        let mut w = Array3::ones((2, 4, 4));
        w[[0, 1, 1]] = 10.0;
        assert!(PatchMask::new(w.clone(), 10.0).is_ok());
        w[[0, 2, 2]] = 3.0;
        assert!(PatchMask::new(w, 10.0).is_err());
    }
}
