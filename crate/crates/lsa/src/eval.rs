//! Evaluation stack: Fréchet feature distances at frame and clip level,
//! an oracle connected-component detector, and detection metrics (mAP at a
//! single IoU threshold, mIoU over matched pairs) with size/class filtering.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array1, Array3, Array4, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbones::Backbones;
use crate::clip::{BoxTrack, VideoClip};
use crate::diffusion::{euler_sample, NoiseSchedule};
use crate::error::{LsaError, Result};
use crate::scenes::{class_names, CLASSES};

pub const EIGENVALUE_FLOOR: f64 = 1e-10;

// ---------------------------------------------------------------------------
// Fréchet distance

#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub mean: Array1<f64>,
    /// symmetric [d x d] sample covariance, (n-1) normalization
    pub covariance: ndarray::Array2<f64>,
    pub sample_count: usize,
}

pub fn gaussian_stats(embeddings: &[Array1<f64>]) -> Result<GaussianStats> {
    if embeddings.len() < 2 {
        return Err(LsaError::invalid(
            "gaussian_stats",
            format!("{} samples, need >= 2", embeddings.len()),
        ));
    }
    let d = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != d) {
        return Err(LsaError::shape(
            "gaussian_stats",
            format!("[{d}]"),
            "mixed dimensions".to_string(),
        ));
    }
    let n = embeddings.len();
    let mut mean = Array1::zeros(d);
    for e in embeddings {
        mean += e;
    }
    mean /= n as f64;
    let mut cov = ndarray::Array2::zeros((d, d));
    for e in embeddings {
        let c = e - &mean;
        for i in 0..d {
            for j in 0..d {
                cov[[i, j]] += c[i] * c[j];
            }
        }
    }
    cov /= (n - 1) as f64;
    Ok(GaussianStats {
        mean,
        covariance: cov,
        sample_count: n,
    })
}

/// Squared Fréchet distance between two Gaussians:
/// `d^2 = |mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2})`.
/// The matrix square root comes from an eigendecomposition of the
/// symmetrized product with eigenvalues floored at `EIGENVALUE_FLOOR`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.mean.len();
    if b.mean.len() != d {
        return Err(LsaError::shape(
            "frechet_distance",
            format!("[{d}]"),
            format!("[{}]", b.mean.len()),
        ));
    }
    let mu_gap: f64 = a
        .mean
        .iter()
        .zip(b.mean.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();

    let to_sym = |c: &ndarray::Array2<f64>| {
        let m = DMatrix::from_fn(d, d, |i, j| c[[i, j]]);
        (&m + m.transpose()) / 2.0
    };
    let s1 = to_sym(&a.covariance);
    let s2 = to_sym(&b.covariance);
    let prod = &s1 * &s2;
    let prod_sym = (&prod + prod.transpose()) / 2.0;
    let eig = nalgebra::SymmetricEigen::new(prod_sym);
    let sqrt_trace: f64 = eig
        .eigenvalues
        .iter()
        .map(|&l| l.max(EIGENVALUE_FLOOR).sqrt())
        .sum();
    let d2 = mu_gap + s1.trace() + s2.trace() - 2.0 * sqrt_trace;
    if !d2.is_finite() {
        return Err(LsaError::NonFinite("frechet_distance".into()));
    }
    Ok(d2.max(0.0))
}

// ---------------------------------------------------------------------------
// embeddings

/// Pool the frozen extractor's grid over one frame: mean feature over all
/// patches. `frame` is `[3, H, W]`.
pub fn frame_embedding(
    frame: &ArrayView3<f64>,
    extractor: &crate::backbones::FeatureExtractor,
) -> Result<Array1<f64>> {
    let (c, h, w) = frame.dim();
    let mut batch = Array4::zeros((1, c, h, w));
    batch.index_axis_mut(ndarray::Axis(0), 0).assign(frame);
    let grid = extractor.extract_pixels(&batch)?;
    let (_, gh, gw, d) = grid.features.dim();
    let mut emb = Array1::zeros(d);
    for u in 0..gh {
        for v in 0..gw {
            for k in 0..d {
                emb[k] += grid.features[[0, u, v, k]];
            }
        }
    }
    Ok(emb / (gh * gw) as f64)
}

/// Clip embedding: mean frame embedding concatenated with the pooled
/// embedding of absolute temporal frame differences, so temporal jitter
/// moves the statistic. `frames` is `[N, 3, H, W]`.
pub fn clip_embedding(
    frames: &Array4<f64>,
    extractor: &crate::backbones::FeatureExtractor,
) -> Result<Array1<f64>> {
    let (n, _, _, _) = frames.dim();
    let d = extractor.spec.feature_dim;
    let mut spatial = Array1::zeros(d);
    for j in 0..n {
        spatial += &frame_embedding(&frames.index_axis(ndarray::Axis(0), j), extractor)?;
    }
    spatial /= n as f64;

    let mut temporal = Array1::zeros(d);
    for j in 1..n {
        let diff = (&frames.index_axis(ndarray::Axis(0), j)
            - &frames.index_axis(ndarray::Axis(0), j - 1))
            .mapv(f64::abs);
        temporal += &frame_embedding(&diff.view(), extractor)?;
        temporal -= &frame_embedding(&Array3::zeros(diff.dim()).view(), extractor)?;
    }
    temporal /= (n - 1).max(1) as f64;

    let mut out = Array1::zeros(2 * d);
    out.slice_mut(ndarray::s![0..d]).assign(&spatial);
    out.slice_mut(ndarray::s![d..2 * d]).assign(&temporal);
    Ok(out)
}

// ---------------------------------------------------------------------------
// oracle detector

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub score: f64,
    pub class_label: String,
}

impl Detection {
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }
    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }
}

/// Connected-component detector over high-contrast pixels. A pixel is
/// foreground when its channel spread (max - min) exceeds
/// `min_score_contrast`; the class is the dominant channel; components merge
/// 4-connected same-class pixels; the score is the mean normalized contrast.
pub fn oracle_detect(frame: &ArrayView3<f64>, min_score_contrast: f64) -> Vec<Detection> {
    let (_, h, w) = frame.dim();
    let mut label: Vec<Option<usize>> = vec![None; h * w]; // class index
    let mut contrast = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = [frame[[0, y, x]], frame[[1, y, x]], frame[[2, y, x]]];
            let max = v.iter().cloned().fold(f64::MIN, f64::max);
            let min = v.iter().cloned().fold(f64::MAX, f64::min);
            if max - min > min_score_contrast {
                let class = v
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                label[y * w + x] = Some(class);
                contrast[y * w + x] = (max - min).clamp(0.0, 1.0);
            }
        }
    }

    let mut seen = vec![false; h * w];
    let mut dets = Vec::new();
    for y0 in 0..h {
        for x0 in 0..w {
            let idx0 = y0 * w + x0;
            let Some(class) = label[idx0] else { continue };
            if seen[idx0] {
                continue;
            }
            // flood fill this same-class component
            let (mut bx0, mut by0, mut bx1, mut by1) = (x0, y0, x0, y0);
            let mut csum = 0.0;
            let mut count = 0usize;
            let mut stack = vec![(x0, y0)];
            seen[idx0] = true;
            while let Some((x, y)) = stack.pop() {
                csum += contrast[y * w + x];
                count += 1;
                bx0 = bx0.min(x);
                by0 = by0.min(y);
                bx1 = bx1.max(x);
                by1 = by1.max(y);
                let mut push = |nx: usize, ny: usize, stack: &mut Vec<(usize, usize)>| {
                    let ni = ny * w + nx;
                    if !seen[ni] && label[ni] == Some(class) {
                        seen[ni] = true;
                        stack.push((nx, ny));
                    }
                };
                if x > 0 {
                    push(x - 1, y, &mut stack);
                }
                if x + 1 < w {
                    push(x + 1, y, &mut stack);
                }
                if y > 0 {
                    push(x, y - 1, &mut stack);
                }
                if y + 1 < h {
                    push(x, y + 1, &mut stack);
                }
            }
            dets.push(Detection {
                x_min: bx0 as f64,
                y_min: by0 as f64,
                x_max: (bx1 + 1) as f64,
                y_max: (by1 + 1) as f64,
                score: csum / count as f64,
                class_label: CLASSES[class].0.to_string(),
            });
        }
    }
    dets
}

// ---------------------------------------------------------------------------
// detection metrics

/// Continuous-area intersection over union of `[x0, y0, x1, y1]` boxes.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn det_box(d: &Detection) -> [f64; 4] {
    [d.x_min, d.y_min, d.x_max, d.y_max]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    /// minimum box side in pixels applied to both GT and predictions
    pub min_size: f64,
}

pub fn apply_filter<'a>(
    dets: &'a [Detection],
    filter: &FilterConfig,
    whitelist: &HashSet<String>,
) -> Vec<&'a Detection> {
    dets.iter()
        .filter(|d| {
            d.width() >= filter.min_size
                && d.height() >= filter.min_size
                && whitelist.contains(&d.class_label)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionScores {
    /// 101-point interpolated AP at the IoU threshold, averaged over
    /// whitelist classes with ground truth
    pub map: f64,
    /// mean IoU over matched pairs only
    pub miou: f64,
    /// matched GT / total GT after filtering
    pub match_rate: f64,
    pub gt_count: usize,
    pub pred_count: usize,
}

/// Greedy score-descending matching and PR scoring. Returns `None` when the
/// filtered ground-truth set is empty (metrics undefined).
pub fn match_and_score(
    gt_per_frame: &[Vec<Detection>],
    pred_per_frame: &[Vec<Detection>],
    iou_threshold: f64,
    filter: &FilterConfig,
    class_whitelist: &[String],
) -> Result<Option<DetectionScores>> {
    if gt_per_frame.len() != pred_per_frame.len() {
        return Err(LsaError::shape(
            "match_and_score",
            format!("{} frames", gt_per_frame.len()),
            format!("{} frames", pred_per_frame.len()),
        ));
    }
    let whitelist: HashSet<String> = class_whitelist.iter().cloned().collect();
    let mut total_gt = 0usize;
    let mut total_pred = 0usize;
    let mut matched_ious: Vec<f64> = Vec::new();
    let mut aps: Vec<f64> = Vec::new();

    for class in class_whitelist {
        // (frame, gt index) ground truth and (score, frame, box) predictions
        let gts: Vec<Vec<&Detection>> = gt_per_frame
            .iter()
            .map(|f| {
                apply_filter(f, filter, &whitelist)
                    .into_iter()
                    .filter(|d| &d.class_label == class)
                    .collect()
            })
            .collect();
        let n_gt: usize = gts.iter().map(|f| f.len()).sum();
        let mut preds: Vec<(usize, &Detection)> = Vec::new();
        for (fi, f) in pred_per_frame.iter().enumerate() {
            for d in apply_filter(f, filter, &whitelist) {
                if &d.class_label == class {
                    preds.push((fi, d));
                }
            }
        }
        total_gt += n_gt;
        total_pred += preds.len();
        if n_gt == 0 {
            continue;
        }
        // score-descending; ties broken by frame then insertion order for
        // determinism
        preds.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap().then(a.0.cmp(&b.0)));

        let mut gt_used: Vec<Vec<bool>> = gts.iter().map(|f| vec![false; f.len()]).collect();
        let mut tp_flags = Vec::with_capacity(preds.len());
        for (fi, p) in &preds {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts[*fi].iter().enumerate() {
                if gt_used[*fi][gi] {
                    continue;
                }
                let v = iou(det_box(p), det_box(g));
                if v >= iou_threshold && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((gi, v));
                }
            }
            match best {
                Some((gi, v)) => {
                    gt_used[*fi][gi] = true;
                    matched_ious.push(v);
                    tp_flags.push(true);
                }
                None => tp_flags.push(false),
            }
        }
        // precision-recall sweep down the ranked list
        let mut pr: Vec<(f64, f64)> = Vec::with_capacity(tp_flags.len());
        let (mut tp, mut fp) = (0usize, 0usize);
        for &is_tp in &tp_flags {
            if is_tp {
                tp += 1;
            } else {
                fp += 1;
            }
            pr.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
        }
        // 101-point interpolation: p(r) = max precision at recall >= r
        let mut ap = 0.0;
        for i in 0..=100 {
            let r = i as f64 / 100.0;
            let p = pr
                .iter()
                .filter(|(rec, _)| *rec >= r)
                .map(|(_, prec)| *prec)
                .fold(0.0, f64::max);
            ap += p;
        }
        aps.push(ap / 101.0);
    }

    if total_gt == 0 {
        return Ok(None);
    }
    let map = aps.iter().sum::<f64>() / aps.len() as f64;
    let miou = if matched_ious.is_empty() {
        0.0
    } else {
        matched_ious.iter().sum::<f64>() / matched_ious.len() as f64
    };
    Ok(Some(DetectionScores {
        map,
        miou,
        match_rate: matched_ious.len() as f64 / total_gt as f64,
        gt_count: total_gt,
        pred_count: total_pred,
    }))
}

// ---------------------------------------------------------------------------
// full evaluation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub min_size: f64,
    pub class_whitelist: Vec<String>,
    pub min_score_contrast: f64,
    /// reference detections from annotation boxes instead of running the
    /// detector on ground-truth frames
    pub annotation_reference: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            min_size: 8.0,
            class_whitelist: class_names(),
            min_score_contrast: 0.25,
            annotation_reference: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClipRecord {
    pub clip_id: String,
    pub gt_detections: usize,
    pub pred_detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frechet_frame: f64,
    pub frechet_clip: f64,
    pub map: f64,
    pub miou: f64,
    pub match_rate: f64,
    /// true when the filtered ground-truth set was empty and the detection
    /// metrics are undefined (zeros above are sentinels)
    pub detection_metrics_undefined: bool,
    pub per_clip: Vec<PerClipRecord>,
    pub config: EvalConfig,
}

impl EvalReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("report serialization");
        std::fs::write(path, json).map_err(|e| LsaError::io(path.display().to_string(), e))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let csv = format!(
            "frechet_frame,frechet_clip,map,miou,match_rate\n{},{},{},{},{}\n",
            self.frechet_frame, self.frechet_clip, self.map, self.miou, self.match_rate
        );
        std::fs::write(path, csv).map_err(|e| LsaError::io(path.display().to_string(), e))
    }
}

fn annotation_detections(boxes: &BoxTrack) -> Vec<Vec<Detection>> {
    boxes
        .frames
        .iter()
        .map(|f| {
            f.iter()
                .map(|b| Detection {
                    x_min: b.x_min,
                    y_min: b.y_min,
                    x_max: b.x_max,
                    y_max: b.y_max,
                    score: 1.0,
                    class_label: b.class_label.clone(),
                })
                .collect()
        })
        .collect()
}

/// Score already-generated frames against ground-truth clips. `generated[i]`
/// must be `[N, 3, H, W]` aligned with `test[i]`.
pub fn report_for(
    test: &[(VideoClip, BoxTrack)],
    generated: &[Array4<f64>],
    extractor: &crate::backbones::FeatureExtractor,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if test.len() != generated.len() {
        return Err(LsaError::shape(
            "report_for",
            format!("{} clips", test.len()),
            format!("{} generated", generated.len()),
        ));
    }
    if test.is_empty() {
        return Err(LsaError::invalid("report_for", "no test clips"));
    }

    struct ClipWork {
        gt_frame_embs: Vec<Array1<f64>>,
        gen_frame_embs: Vec<Array1<f64>>,
        gt_clip_emb: Array1<f64>,
        gen_clip_emb: Array1<f64>,
        gt_dets: Vec<Vec<Detection>>,
        pred_dets: Vec<Vec<Detection>>,
        record: PerClipRecord,
    }

    let work: Vec<ClipWork> = test
        .par_iter()
        .zip(generated.par_iter())
        .map(|((clip, boxes), gen)| -> Result<ClipWork> {
            let n = clip.num_frames();
            if gen.dim() != clip.frames.dim() {
                return Err(LsaError::shape(
                    format!("generated clip {}", clip.clip_id),
                    format!("{:?}", clip.frames.dim()),
                    format!("{:?}", gen.dim()),
                ));
            }
            let mut gt_frame_embs = Vec::with_capacity(n);
            let mut gen_frame_embs = Vec::with_capacity(n);
            let mut gt_dets = Vec::with_capacity(n);
            let mut pred_dets = Vec::with_capacity(n);
            for j in 0..n {
                let gt_frame = clip.frames.index_axis(ndarray::Axis(0), j);
                let gen_frame = gen.index_axis(ndarray::Axis(0), j);
                gt_frame_embs.push(frame_embedding(&gt_frame, extractor)?);
                gen_frame_embs.push(frame_embedding(&gen_frame, extractor)?);
                gt_dets.push(oracle_detect(&gt_frame, cfg.min_score_contrast));
                pred_dets.push(oracle_detect(&gen_frame, cfg.min_score_contrast));
            }
            if cfg.annotation_reference {
                gt_dets = annotation_detections(boxes);
            }
            let record = PerClipRecord {
                clip_id: clip.clip_id.clone(),
                gt_detections: gt_dets.iter().map(|f| f.len()).sum(),
                pred_detections: pred_dets.iter().map(|f| f.len()).sum(),
            };
            Ok(ClipWork {
                gt_frame_embs,
                gen_frame_embs,
                gt_clip_emb: clip_embedding(&clip.frames, extractor)?,
                gen_clip_emb: clip_embedding(gen, extractor)?,
                gt_dets,
                pred_dets,
                record,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let gt_frames: Vec<Array1<f64>> = work.iter().flat_map(|w| w.gt_frame_embs.clone()).collect();
    let gen_frames: Vec<Array1<f64>> =
        work.iter().flat_map(|w| w.gen_frame_embs.clone()).collect();
    let frechet_frame = frechet_distance(&gaussian_stats(&gt_frames)?, &gaussian_stats(&gen_frames)?)?;

    let gt_clips: Vec<Array1<f64>> = work.iter().map(|w| w.gt_clip_emb.clone()).collect();
    let gen_clips: Vec<Array1<f64>> = work.iter().map(|w| w.gen_clip_emb.clone()).collect();
    let frechet_clip = if gt_clips.len() >= 2 {
        frechet_distance(&gaussian_stats(&gt_clips)?, &gaussian_stats(&gen_clips)?)?
    } else {
        // single-clip degenerate case: fall back to the mean-gap term
        gt_clips[0]
            .iter()
            .zip(gen_clips[0].iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    };

    let gt_all: Vec<Vec<Detection>> = work.iter().flat_map(|w| w.gt_dets.clone()).collect();
    let pred_all: Vec<Vec<Detection>> = work.iter().flat_map(|w| w.pred_dets.clone()).collect();
    let filter = FilterConfig { min_size: cfg.min_size };
    let scores = match_and_score(
        &gt_all,
        &pred_all,
        cfg.iou_threshold,
        &filter,
        &cfg.class_whitelist,
    )?;

    let (map, miou, match_rate, undefined) = match scores {
        Some(s) => (s.map, s.miou, s.match_rate, false),
        None => (0.0, 0.0, 0.0, true),
    };
    Ok(EvalReport {
        frechet_frame,
        frechet_clip,
        map,
        miou,
        match_rate,
        detection_metrics_undefined: undefined,
        per_clip: work.into_iter().map(|w| w.record).collect(),
        config: cfg.clone(),
    })
}

/// Generate one clip conditioned on a test clip's first frame and decode it.
pub fn generate_for_clip(
    nets: &Backbones,
    schedule: &NoiseSchedule,
    clip: &VideoClip,
    seed: u64,
) -> Result<Array4<f64>> {
    let n = clip.num_frames();
    let cond = nets.condition_for(&clip.frames, n)?;
    let (lc, lh, lw) = {
        let z = nets.codec.encode(clip)?;
        let (_, c, h, w) = z.shape();
        (c, h, w)
    };
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let init = Array4::from_shape_fn((n, lc, lh, lw), |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * schedule.sigma_max
    });
    let z0 = euler_sample(
        |zt, sigma| nets.denoiser.denoise(zt, sigma, &cond),
        schedule,
        init,
    )?;
    nets.codec.decode(&z0)
}

/// Full evaluation: sample every test clip from its first frame with the
/// Euler sampler, decode, and score. Deterministic in `cfg.seed`.
pub fn evaluate(
    nets: &Backbones,
    schedule: &NoiseSchedule,
    test: &[(VideoClip, BoxTrack)],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(LsaError::invalid("evaluate", "no test clips"));
    }
    // derive one seed per clip up front so parallelism cannot reorder draws
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let seeds: Vec<u64> = (0..test.len()).map(|_| rng.gen()).collect();
    let generated: Vec<Array4<f64>> = test
        .par_iter()
        .zip(seeds.par_iter())
        .map(|((clip, _), &s)| generate_for_clip(nets, schedule, clip, s))
        .collect::<Result<Vec<_>>>()?;
    report_for(test, &generated, &nets.extractor, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::{FeatureExtractor, FeatureExtractorSpec};
    use crate::scenes::{generate_clip, Background, MotionModel, SceneSpec};
    use ndarray::array;

    fn extractor() -> FeatureExtractor {
        FeatureExtractor::new(FeatureExtractorSpec::default()).unwrap()
    }

    #[test]
    fn gaussian_stats_hand_case() {
        let s = gaussian_stats(&[array![0.0, 0.0], array![2.0, 0.0]]).unwrap();
        assert_eq!(s.mean, array![1.0, 0.0]);
        assert_eq!(s.covariance, ndarray::array![[2.0, 0.0], [0.0, 0.0]]);
        assert_eq!(s.sample_count, 2);

        // two copies of one vector: zero covariance
        let z = gaussian_stats(&[array![3.0, 1.0], array![3.0, 1.0]]).unwrap();
        assert!(z.covariance.iter().all(|&v| v == 0.0));

        // permutation invariance
        let a = gaussian_stats(&[array![1.0, 2.0], array![3.0, -1.0], array![0.0, 0.5]]).unwrap();
        let b = gaussian_stats(&[array![0.0, 0.5], array![1.0, 2.0], array![3.0, -1.0]]).unwrap();
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.covariance, b.covariance);

        assert!(gaussian_stats(&[array![1.0]]).is_err());
    }

    #[test]
    fn frechet_known_values() {
        let a = gaussian_stats(&[array![0.0, 1.0], array![2.0, 3.0], array![1.0, -1.0]]).unwrap();
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-9);

        // 1-D, unit variances, means 0 and 1 -> d^2 = 1
        let s1 = GaussianStats {
            mean: array![0.0],
            covariance: ndarray::array![[1.0]],
            sample_count: 10,
        };
        let s2 = GaussianStats {
            mean: array![1.0],
            covariance: ndarray::array![[1.0]],
            sample_count: 10,
        };
        assert!((frechet_distance(&s1, &s2).unwrap() - 1.0).abs() < 1e-12);

        // commuting diagonals: diag(1,4) vs diag(4,1), equal means -> d^2 = 2
        let d1 = GaussianStats {
            mean: array![0.0, 0.0],
            covariance: ndarray::array![[1.0, 0.0], [0.0, 4.0]],
            sample_count: 10,
        };
        let d2 = GaussianStats {
            mean: array![0.0, 0.0],
            covariance: ndarray::array![[4.0, 0.0], [0.0, 1.0]],
            sample_count: 10,
        };
        assert!((frechet_distance(&d1, &d2).unwrap() - 2.0).abs() < 1e-12);
        // symmetry
        assert!(
            (frechet_distance(&d1, &d2).unwrap() - frechet_distance(&d2, &d1).unwrap()).abs()
                < 1e-12
        );
    }

    fn test_scene(seed: u64) -> (VideoClip, BoxTrack) {
        let spec = SceneSpec {
            num_objects: 1,
            motion_model: MotionModel::Linear,
            object_size_range: (16.0, 20.0),
            background: Background::Gradient,
            ego_motion: 0.5,
            seed,
        };
        generate_clip(&spec, 4, 64, 64).unwrap()
    }

    #[test]
    fn embeddings_deterministic_and_temporally_sensitive() {
        let net = extractor();
        let (clip, _) = test_scene(5);
        let e1 = clip_embedding(&clip.frames, &net).unwrap();
        let e2 = clip_embedding(&clip.frames, &net).unwrap();
        assert_eq!(e1, e2);

        // reverse frame order: clip embedding must move
        let mut rev = clip.frames.clone();
        let n = rev.dim().0;
        for j in 0..n {
            rev.index_axis_mut(ndarray::Axis(0), j)
                .assign(&clip.frames.index_axis(ndarray::Axis(0), n - 1 - j));
        }
        let er = clip_embedding(&rev, &net).unwrap();
        assert_ne!(e1, er);

        // constant clip: temporal half is ~0
        let flat = Array4::from_elem((4, 3, 16, 16), 0.25);
        let ef = clip_embedding(&flat, &net).unwrap();
        let d = net.spec.feature_dim;
        for k in d..2 * d {
            assert!(ef[k].abs() < 1e-9, "temporal component {k} = {}", ef[k]);
        }
    }

    #[test]
    fn oracle_detects_synthetic_objects() {
        for seed in 0..30u64 {
            let (clip, boxes) = test_scene(seed);
            if boxes.frames[0].len() != 1 {
                continue;
            }
            let b = &boxes.frames[0][0];
            // require a fully-visible object
            if b.x_min <= 0.0 || b.y_min <= 0.0 || b.x_max >= 64.0 || b.y_max >= 64.0 {
                continue;
            }
            let frame = clip.frames.index_axis(ndarray::Axis(0), 0);
            let dets = oracle_detect(&frame, 0.25);
            assert_eq!(dets.len(), 1, "seed {seed}");
            let d = &dets[0];
            assert_eq!(d.class_label, b.class_label);
            let v = iou(det_box(d), [b.x_min, b.y_min, b.x_max, b.y_max]);
            assert!(v > 0.9, "seed {seed}: IoU {v}");
            return;
        }
        panic!("no fully-visible single-object scene found");
    }

    #[test]
    fn oracle_background_only_and_two_objects() {
        let spec = SceneSpec {
            num_objects: 0,
            motion_model: MotionModel::Linear,
            object_size_range: (16.0, 20.0),
            background: Background::Texture,
            ego_motion: 1.0,
            seed: 3,
        };
        let (clip, _) = generate_clip(&spec, 2, 64, 64).unwrap();
        let dets = oracle_detect(&clip.frames.index_axis(ndarray::Axis(0), 0), 0.25);
        assert!(dets.is_empty());

        for seed in 0..60u64 {
            let spec2 = SceneSpec {
                num_objects: 2,
                seed,
                ..spec.clone()
            };
            let (clip2, boxes2) = generate_clip(&spec2, 2, 64, 64).unwrap();
            // want two well-separated fully-visible objects
            if boxes2.frames[0].len() != 2 {
                continue;
            }
            let (a, b) = (&boxes2.frames[0][0], &boxes2.frames[0][1]);
            let gap = iou(
                [a.x_min - 2.0, a.y_min - 2.0, a.x_max + 2.0, a.y_max + 2.0],
                [b.x_min - 2.0, b.y_min - 2.0, b.x_max + 2.0, b.y_max + 2.0],
            );
            if gap > 0.0 || a.class_label == b.class_label {
                continue;
            }
            let dets = oracle_detect(&clip2.frames.index_axis(ndarray::Axis(0), 0), 0.25);
            assert_eq!(dets.len(), 2, "seed {seed}");
            return;
        }
        panic!("no two-object scene found");
    }

    #[test]
    fn iou_known_values_and_properties() {
        assert_eq!(iou([0.0, 0.0, 2.0, 2.0], [0.0, 0.0, 2.0, 2.0]), 1.0);
        assert_eq!(iou([0.0, 0.0, 1.0, 1.0], [2.0, 2.0, 3.0, 3.0]), 0.0);
        let v = iou([0.0, 0.0, 2.0, 2.0], [1.0, 1.0, 3.0, 3.0]);
        assert!((v - 1.0 / 7.0).abs() < 1e-12);
        // symmetry and integer-scale invariance
        let (a, b) = ([0.5, 1.0, 4.0, 3.5], [1.5, 0.0, 5.0, 3.0]);
        assert_eq!(iou(a, b), iou(b, a));
        let scale = |r: [f64; 4], k: f64| [r[0] * k, r[1] * k, r[2] * k, r[3] * k];
        assert!((iou(a, b) - iou(scale(a, 3.0), scale(b, 3.0))).abs() < 1e-12);
    }

    fn det(b: [f64; 4], score: f64, class: &str) -> Detection {
        Detection {
            x_min: b[0],
            y_min: b[1],
            x_max: b[2],
            y_max: b[3],
            score,
            class_label: class.into(),
        }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gt = vec![
            vec![det([0.0, 0.0, 20.0, 20.0], 1.0, "car")],
            vec![det([5.0, 5.0, 30.0, 30.0], 1.0, "bus")],
        ];
        let filter = FilterConfig { min_size: 16.0 };
        let s = match_and_score(&gt, &gt, 0.5, &filter, &class_names())
            .unwrap()
            .unwrap();
        assert_eq!(s.map, 1.0);
        assert_eq!(s.miou, 1.0);
        assert_eq!(s.match_rate, 1.0);

        // no predictions at all
        let none = vec![vec![], vec![]];
        let s0 = match_and_score(&gt, &none, 0.5, &filter, &class_names())
            .unwrap()
            .unwrap();
        assert_eq!(s0.map, 0.0);

        // empty filtered GT -> sentinel
        let empty = match_and_score(&none, &gt, 0.5, &filter, &class_names()).unwrap();
        assert!(empty.is_none());
    }

    /// Brute-force AP reference for scenarios where each prediction overlaps
    /// at most one GT box above threshold (greedy = optimal).
    fn reference_ap(gt: &[Vec<Detection>], preds: &[Vec<Detection>], thr: f64) -> (f64, f64) {
        let n_gt: usize = gt.iter().map(|f| f.len()).sum();
        let mut ranked: Vec<(usize, &Detection)> = Vec::new();
        for (fi, f) in preds.iter().enumerate() {
            for d in f {
                ranked.push((fi, d));
            }
        }
        ranked.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap());
        let mut used: Vec<Vec<bool>> = gt.iter().map(|f| vec![false; f.len()]).collect();
        let mut tp = 0usize;
        let mut ious = Vec::new();
        let mut pr = Vec::new();
        for (rank, (fi, p)) in ranked.iter().enumerate() {
            for (gi, g) in gt[*fi].iter().enumerate() {
                let v = iou(det_box(p), det_box(g));
                if v >= thr && !used[*fi][gi] {
                    used[*fi][gi] = true;
                    tp += 1;
                    ious.push(v);
                    break;
                }
            }
            pr.push((tp as f64 / n_gt as f64, tp as f64 / (rank + 1) as f64));
        }
        let mut ap = 0.0;
        for i in 0..=100 {
            let r = i as f64 / 100.0;
            ap += pr
                .iter()
                .filter(|(rec, _)| *rec >= r)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max);
        }
        let miou = ious.iter().sum::<f64>() / ious.len().max(1) as f64;
        (ap / 101.0, miou)
    }

    #[test]
    fn handcrafted_scenario_matches_reference() {
        // frame 0: TP at IoU 0.8^ish; frame 1: FP; frame 2: FN (no pred)
        let gt = vec![
            vec![det([0.0, 0.0, 20.0, 20.0], 1.0, "car")],
            vec![],
            vec![det([10.0, 10.0, 40.0, 40.0], 1.0, "car")],
        ];
        let preds = vec![
            vec![det([0.0, 0.0, 20.0, 16.0], 0.9, "car")], // IoU 0.8
            vec![det([30.0, 30.0, 50.0, 50.0], 0.8, "car")],
            vec![],
        ];
        let filter = FilterConfig { min_size: 10.0 };
        let s = match_and_score(&gt, &preds, 0.5, &filter, &class_names())
            .unwrap()
            .unwrap();
        let (ap_ref, miou_ref) = reference_ap(&gt, &preds, 0.5);
        assert!((s.map - ap_ref).abs() < 1e-12, "{} vs {}", s.map, ap_ref);
        assert!((s.miou - miou_ref).abs() < 1e-12);
        assert!((s.miou - 0.8).abs() < 1e-12);
        assert!((s.map - 51.0 / 101.0).abs() < 1e-12);
        assert!((s.match_rate - 0.5).abs() < 1e-12);

        // mAP invariant under strictly monotone score transforms
        let squash: Vec<Vec<Detection>> = preds
            .iter()
            .map(|f| {
                f.iter()
                    .map(|d| Detection { score: d.score * d.score / 2.0, ..d.clone() })
                    .collect()
            })
            .collect();
        let s2 = match_and_score(&gt, &squash, 0.5, &filter, &class_names())
            .unwrap()
            .unwrap();
        assert_eq!(s.map, s2.map);
    }

    #[test]
    fn shrinking_min_size_never_drops_gt_boxes() {
        let dets = vec![
            det([0.0, 0.0, 12.0, 12.0], 1.0, "car"),
            det([0.0, 0.0, 20.0, 20.0], 1.0, "bus"),
            det([0.0, 0.0, 30.0, 17.0], 1.0, "car"),
        ];
        let whitelist: HashSet<String> = class_names().into_iter().collect();
        let mut last = 0;
        for min_size in [24.0, 16.0, 12.0, 4.0] {
            let n = apply_filter(&dets, &FilterConfig { min_size }, &whitelist).len();
            assert!(n >= last);
            last = n;
        }
        assert_eq!(last, 3);
    }

    #[test]
    fn self_comparison_is_perfect() {
        let test: Vec<(VideoClip, BoxTrack)> = (0..6).map(test_scene).collect();
        let generated: Vec<Array4<f64>> = test.iter().map(|(c, _)| c.frames.clone()).collect();
        let cfg = EvalConfig { min_size: 8.0, ..EvalConfig::default() };
        let r = report_for(&test, &generated, &extractor(), &cfg).unwrap();
        assert!(r.frechet_frame.abs() < 1e-6, "frame {}", r.frechet_frame);
        assert!(r.frechet_clip.abs() < 1e-6, "clip {}", r.frechet_clip);
        assert!(!r.detection_metrics_undefined);
        assert_eq!(r.map, 1.0);
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn noise_videos_score_badly() {
        let test: Vec<(VideoClip, BoxTrack)> = (0..6).map(test_scene).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let generated: Vec<Array4<f64>> = test
            .iter()
            .map(|(c, _)| Array4::from_shape_fn(c.frames.dim(), |_| rng.gen::<f64>()))
            .collect();
        let cfg = EvalConfig { min_size: 8.0, ..EvalConfig::default() };
        let noisy = report_for(&test, &generated, &extractor(), &cfg).unwrap();
        let self_gen: Vec<Array4<f64>> = test.iter().map(|(c, _)| c.frames.clone()).collect();
        let perfect = report_for(&test, &self_gen, &extractor(), &cfg).unwrap();
        assert!(noisy.frechet_frame > perfect.frechet_frame + 0.1);
        assert!(noisy.frechet_clip > perfect.frechet_clip + 0.1);
        assert!(noisy.map < 0.1, "map {}", noisy.map);
    }
}
