//! Dynamic-object patch masks, the masked semantic feature consistency
//! loss, its ablation variants, and the combined training objective.

use ndarray::{Array3, Array4, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::backbones::{channel_first, Backbones};
use crate::clip::{BoxTrack, FeatureGrid, LatentClip, LossBreakdown, PatchMask, VideoClip};
use crate::diffusion::{c_out, c_skip, loss_weight};
use crate::error::{LsaError, Result};
use crate::graph::Graph;

/// Mask ablation variants: weights {1, alpha} / {0, alpha} / all-ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskVariant {
    Hybrid,
    BoxOnly,
    GlobalOnly,
}

/// Rule deciding when a patch counts as dynamic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskRule {
    /// Any pixel overlap with a box (default).
    AnyOverlap,
    /// Patch center inside a box.
    Center,
    /// At least this fraction of the patch area covered.
    MinFraction(f64),
}

/// Where the mask multiplies in the squared error. `PreSquare` is the
/// formula as written (effective weight alpha^2); `PostSquare` weights the
/// squared difference (effective weight alpha).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskApplication {
    PreSquare,
    PostSquare,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_feat: f64,
    pub diffusion_weight: f64,
    pub variant: MaskVariant,
    pub alpha: f64,
    pub mask_rule: MaskRule,
    pub mask_application: MaskApplication,
}

impl LossConfig {
    pub fn diffusion_only() -> Self {
        Self {
            lambda_feat: 0.0,
            diffusion_weight: 1.0,
            variant: MaskVariant::Hybrid,
            alpha: 10.0,
            mask_rule: MaskRule::AnyOverlap,
            mask_application: MaskApplication::PreSquare,
        }
    }

    pub fn combined(lambda_feat: f64, variant: MaskVariant, alpha: f64) -> Self {
        Self {
            lambda_feat,
            diffusion_weight: 0.9,
            variant,
            alpha,
            mask_rule: MaskRule::AnyOverlap,
            mask_application: MaskApplication::PreSquare,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_feat < 0.0 || !self.lambda_feat.is_finite() {
            return Err(LsaError::invalid("LossConfig", "lambda_feat must be >= 0"));
        }
        if self.alpha < 1.0 {
            return Err(LsaError::invalid("LossConfig", "alpha must be >= 1"));
        }
        Ok(())
    }
}

fn patch_is_dynamic(
    boxes: &[crate::clip::BBox],
    u: usize,
    v: usize,
    p: f64,
    rule: MaskRule,
) -> bool {
    let (px0, py0) = (v as f64 * p, u as f64 * p);
    let (px1, py1) = (px0 + p, py0 + p);
    boxes.iter().any(|b| match rule {
        MaskRule::AnyOverlap => b.x_min < px1 && b.x_max > px0 && b.y_min < py1 && b.y_max > py0,
        MaskRule::Center => {
            let (cx, cy) = ((px0 + px1) / 2.0, (py0 + py1) / 2.0);
            cx >= b.x_min && cx <= b.x_max && cy >= b.y_min && cy <= b.y_max
        }
        MaskRule::MinFraction(tau) => {
            let ix = (b.x_max.min(px1) - b.x_min.max(px0)).max(0.0);
            let iy = (b.y_max.min(py1) - b.y_min.max(py0)).max(0.0);
            ix * iy / (p * p) >= tau
        }
    })
}

/// Build the per-frame patch weight grid for a clip's box track.
/// `grid` is `(grid_h, grid_w)`; frame dims are `grid * p`.
pub fn build_mask(
    boxes: &BoxTrack,
    grid: (usize, usize),
    p: usize,
    variant: MaskVariant,
    alpha: f64,
    rule: MaskRule,
) -> Result<PatchMask> {
    if alpha < 1.0 || !alpha.is_finite() {
        return Err(LsaError::invalid("build_mask", format!("alpha = {alpha}")));
    }
    let (gh, gw) = grid;
    let n = boxes.frames.len();
    boxes.validate(n, (gw * p) as f64, (gh * p) as f64)?;

    let mut weights = match variant {
        MaskVariant::BoxOnly => Array3::zeros((n, gh, gw)),
        _ => Array3::ones((n, gh, gw)),
    };
    if variant != MaskVariant::GlobalOnly {
        for (j, frame_boxes) in boxes.frames.iter().enumerate() {
            for u in 0..gh {
                for v in 0..gw {
                    if patch_is_dynamic(frame_boxes, u, v, p as f64, rule) {
                        weights[[j, u, v]] = alpha;
                    }
                }
            }
        }
    }
    PatchMask::new(weights, alpha)
}

/// Masked feature MSE: mean over (frame, patch, channel) of
/// `((f_gt - f_gen) * m)^2`, the mask broadcast over channels.
pub fn feature_consistency_loss(
    f_gt: &FeatureGrid,
    f_gen: &FeatureGrid,
    mask: &PatchMask,
) -> Result<f64> {
    feature_consistency_loss_with(f_gt, f_gen, mask, MaskApplication::PreSquare)
}

pub fn feature_consistency_loss_with(
    f_gt: &FeatureGrid,
    f_gen: &FeatureGrid,
    mask: &PatchMask,
    application: MaskApplication,
) -> Result<f64> {
    let dims = f_gt.features.dim();
    if f_gen.features.dim() != dims {
        return Err(LsaError::shape(
            "feature_consistency_loss",
            format!("{dims:?}"),
            format!("{:?}", f_gen.features.dim()),
        ));
    }
    let (n, gh, gw, d) = dims;
    if mask.weights.dim() != (n, gh, gw) {
        return Err(LsaError::shape(
            "feature_consistency_loss mask",
            format!("{:?}", (n, gh, gw)),
            format!("{:?}", mask.weights.dim()),
        ));
    }
    let mut sum = 0.0;
    for j in 0..n {
        for u in 0..gh {
            for v in 0..gw {
                let m = mask.weights[[j, u, v]];
                let w = match application {
                    MaskApplication::PreSquare => m * m,
                    MaskApplication::PostSquare => m,
                };
                for k in 0..d {
                    let diff = f_gt.features[[j, u, v, k]] - f_gen.features[[j, u, v, k]];
                    sum += w * diff * diff;
                }
            }
        }
    }
    Ok(sum / (n * gh * gw * d) as f64)
}

/// total = diffusion_weight * l_diff + lambda_feat * l_feat
pub fn combined_loss(l_diff: f64, l_feat: f64, cfg: &LossConfig) -> LossBreakdown {
    LossBreakdown {
        diffusion_loss: l_diff,
        feature_loss: l_feat,
        total: cfg.diffusion_weight * l_diff + cfg.lambda_feat * l_feat,
        diffusion_weight: cfg.diffusion_weight,
        lambda_feat: cfg.lambda_feat,
    }
}

/// Full differentiable training objective for one clip.
pub struct LossOutput {
    pub breakdown: LossBreakdown,
    /// Gradients of `total` w.r.t. the denoiser parameters, in parameter
    /// order.
    pub denoiser_grads: Vec<ArrayD<f64>>,
    /// Gradient of `total` w.r.t. the noisy input latents.
    pub input_latent_grad: ArrayD<f64>,
}

/// Compose encode -> add_noise -> denoise -> denoised-estimate -> decode ->
/// extract -> mask -> feature loss -> combined objective on one tape and
/// return the breakdown plus gradients. Codec and extractor are bound
/// frozen; gradients flow through them to the denoiser only.
pub fn lsa_training_loss(
    clip: &VideoClip,
    boxes: &BoxTrack,
    sigma: f64,
    noise: &Array4<f64>,
    nets: &Backbones,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    let w_sigma = loss_weight(sigma)?;
    let n = clip.num_frames();
    let p = nets.extractor.spec.patch_size;
    clip.check_divisibility(p, "feature patch size")?;

    let z0 = nets.codec.encode(clip)?;
    if noise.dim() != z0.latents.dim() {
        return Err(LsaError::shape(
            "lsa_training_loss noise",
            format!("{:?}", z0.latents.dim()),
            format!("{:?}", noise.dim()),
        ));
    }
    let cond = nets.condition_for(&clip.frames, n)?;
    let zt_arr = &z0.latents + &(noise * sigma);

    let f_gt = nets.extractor.extract_features(clip)?;
    let (_, gh, gw, d) = f_gt.features.dim();
    let mask = build_mask(boxes, (gh, gw), p, cfg.variant, cfg.alpha, cfg.mask_rule)?;

    let mut g = Graph::new();
    let den = nets.denoiser.params.bind(&mut g, true);
    let codec_p = nets.codec.params.bind(&mut g, false);
    let extr_p = nets.extractor.params.bind(&mut g, false);

    let zt = g.leaf(zt_arr.into_dyn(), true);
    let v = nets.denoiser.forward_vars(&mut g, &den, zt, sigma, &cond);

    // z0_hat = c_out v + c_skip z_t
    let sv = g.scale(v, c_out(sigma));
    let sz = g.scale(zt, c_skip(sigma));
    let z0_hat = g.add(sv, sz);

    // scheduler-weighted diffusion loss
    let neg_z0 = z0.latents.mapv(|x| -x).into_dyn();
    let diff = g.affine_const(z0_hat, 1.0, neg_z0);
    let sq = g.square(diff);
    let mse = g.mean_all(sq);
    let l_diff = g.scale(mse, w_sigma);

    // decode and extract features of the generated frames
    let x_hat = nets.codec.decode_vars(&mut g, &codec_p, z0_hat);
    let f_gen = nets.extractor.extract_vars(&mut g, &extr_p, x_hat); // [N,d,gh,gw]

    // mask broadcast over channels, channel-first layout
    let mut mask_full = Array4::zeros((n, d, gh, gw));
    for j in 0..n {
        for k in 0..d {
            for u in 0..gh {
                for v_ in 0..gw {
                    mask_full[[j, k, u, v_]] = mask.weights[[j, u, v_]];
                }
            }
        }
    }
    let f_gt_cf = channel_first(&f_gt.features).into_dyn();
    let fdiff = g.affine_const(f_gen, -1.0, f_gt_cf);
    let l_feat = match cfg.mask_application {
        MaskApplication::PreSquare => {
            let masked = g.mul_const(fdiff, mask_full.into_dyn());
            let sq = g.square(masked);
            g.mean_all(sq)
        }
        MaskApplication::PostSquare => {
            let sq = g.square(fdiff);
            let weighted = g.mul_const(sq, mask_full.into_dyn());
            g.mean_all(weighted)
        }
    };

    let wd = g.scale(l_diff, cfg.diffusion_weight);
    let wf = g.scale(l_feat, cfg.lambda_feat);
    let total = g.add(wd, wf);

    let grads = g.backward(total);
    let denoiser_grads = den
        .vars()
        .iter()
        .enumerate()
        .map(|(i, var)| {
            grads.get(*var).cloned().unwrap_or_else(|| {
                ArrayD::zeros(IxDyn(nets.denoiser.params.value_at(i).shape()))
            })
        })
        .collect();
    let input_latent_grad = grads
        .get(zt)
        .cloned()
        .unwrap_or_else(|| ArrayD::zeros(IxDyn(&[n])));

    let breakdown = LossBreakdown {
        diffusion_loss: g.scalar(l_diff),
        feature_loss: g.scalar(l_feat),
        total: g.scalar(total),
        diffusion_weight: cfg.diffusion_weight,
        lambda_feat: cfg.lambda_feat,
    };
    Ok(LossOutput {
        breakdown,
        denoiser_grads,
        input_latent_grad,
    })
}

/// Non-tape reference path: compute the same breakdown from an explicit
/// denoised estimate using the inference entry points. Used to cross-check
/// the tape composition and for oracle constructions in tests.
pub fn losses_from_estimate(
    clip: &VideoClip,
    boxes: &BoxTrack,
    z0: &LatentClip,
    z0_hat: &LatentClip,
    sigma: f64,
    nets: &Backbones,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let l_diff = crate::diffusion::diffusion_loss(z0_hat, z0, sigma)?;
    let x_hat = nets.codec.decode(z0_hat)?;
    let f_gen = nets.extractor.extract_pixels(&x_hat)?;
    let f_gt = nets.extractor.extract_features(clip)?;
    let (_, gh, gw, _) = f_gt.features.dim();
    let mask = build_mask(
        boxes,
        (gh, gw),
        nets.extractor.spec.patch_size,
        cfg.variant,
        cfg.alpha,
        cfg.mask_rule,
    )?;
    let l_feat = feature_consistency_loss_with(&f_gt, &f_gen, &mask, cfg.mask_application)?;
    Ok(combined_loss(l_diff, l_feat, cfg))
}
