//! Toy, swappable network backbones: latent codec (encoder/decoder),
//! spatio-temporal velocity denoiser, and a frozen patch feature extractor.
//!
//! All three run on the autodiff tape in [`crate::graph`]; inference entry
//! points just build a throwaway graph and read the forward value, so the
//! training and evaluation paths share one implementation.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array4, ArrayD, Ix4, IxDyn};
use serde::{Deserialize, Serialize};

use crate::clip::{FeatureGrid, LatentClip, VideoClip};
use crate::diffusion::VelocityPrediction;
use crate::error::{LsaError, Result};
use crate::graph::{Graph, Var};
use crate::nn::{BoundParams, Initializer, ParamBlob, ParamSet};

pub const CHECKPOINT_VERSION: u32 = 1;

/// First-frame conditioning: encoder output of frame 0 replicated N times
/// (concatenated with the noisy latents inside the denoiser) plus a global
/// embedding vector injected through feature-wise modulation.
#[derive(Debug, Clone)]
pub struct ConditionBundle {
    pub first_frame_latent_replicated: Array4<f64>,
    pub first_frame_embedding: Array1<f64>,
}

impl ConditionBundle {
    pub fn new(replicated: Array4<f64>, embedding: Array1<f64>) -> Result<Self> {
        if replicated.iter().chain(embedding.iter()).any(|v| !v.is_finite()) {
            return Err(LsaError::NonFinite("ConditionBundle".into()));
        }
        let first = replicated.index_axis(ndarray::Axis(0), 0).to_owned();
        for j in 1..replicated.dim().0 {
            if replicated.index_axis(ndarray::Axis(0), j) != first {
                return Err(LsaError::invalid(
                    "ConditionBundle",
                    format!("latent slice {j} differs from slice 0"),
                ));
            }
        }
        Ok(Self {
            first_frame_latent_replicated: replicated,
            first_frame_embedding: embedding,
        })
    }

    /// Encode frame 0 of `frames`, replicate it `n` times, and pool the
    /// frozen feature extractor over frame 0 for the global embedding.
    pub fn from_first_frame(
        frames: &Array4<f64>,
        n: usize,
        codec: &Codec,
        extractor: &FeatureExtractor,
    ) -> Result<Self> {
        let first = frames
            .slice(ndarray::s![0..1, .., .., ..])
            .to_owned()
            .as_standard_layout()
            .into_owned();
        let latent = codec.encode_pixels(&first)?;
        let (_, c, h, w) = latent.dim();
        let mut replicated = Array4::zeros((n, c, h, w));
        for j in 0..n {
            replicated
                .index_axis_mut(ndarray::Axis(0), j)
                .assign(&latent.index_axis(ndarray::Axis(0), 0));
        }
        let grid = extractor.extract_pixels(&first)?;
        let (_, gh, gw, d) = grid.features.dim();
        let mut embedding = Array1::zeros(d);
        for u in 0..gh {
            for v in 0..gw {
                for k in 0..d {
                    embedding[k] += grid.features[[0, u, v, k]];
                }
            }
        }
        embedding /= (gh * gw) as f64;
        ConditionBundle::new(replicated, embedding)
    }
}

// ---------------------------------------------------------------------------
// codec

/// Latent codec shape parameters. `downsample` must be a power of two; the
/// toy architecture stacks stride-2 stages to reach it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecSpec {
    pub downsample: usize,
    pub latent_channels: usize,
    pub hidden_channels: usize,
    pub parameter_seed: u64,
}

impl Default for CodecSpec {
    fn default() -> Self {
        Self {
            downsample: 4,
            latent_channels: 4,
            hidden_channels: 8,
            parameter_seed: 1000,
        }
    }
}

/// Per-frame convolutional autoencoder. Frames map through the batch axis,
/// so every frame is encoded and decoded independently.
#[derive(Debug, Clone)]
pub struct Codec {
    pub spec: CodecSpec,
    pub params: ParamSet,
}

impl Codec {
    pub fn new(spec: CodecSpec) -> Result<Self> {
        if !matches!(spec.downsample, 2 | 4) {
            return Err(LsaError::invalid(
                "CodecSpec",
                format!("downsample {} unsupported (2 or 4)", spec.downsample),
            ));
        }
        let mut init = Initializer::new(spec.parameter_seed);
        let (h, c) = (spec.hidden_channels, spec.latent_channels);
        let mut params = ParamSet::new();
        params.add("enc.conv1.w", init.conv(h, 3, 3));
        params.add("enc.conv1.b", init.zeros(&[h]));
        params.add("enc.conv2.w", init.conv(c, h, 3));
        params.add("enc.conv2.b", init.zeros(&[c]));
        params.add("dec.conv1.w", init.conv(h, c, 3));
        params.add("dec.conv1.b", init.zeros(&[h]));
        params.add("dec.conv2.w", init.conv(3, h, 3));
        params.add("dec.conv2.b", init.zeros(&[3]));
        Ok(Self { spec, params })
    }

    fn second_stride(&self) -> usize {
        if self.spec.downsample == 4 {
            2
        } else {
            1
        }
    }

    /// Tape-level encoder: `[B,3,H,W] -> [B,c,H/ds,W/ds]`.
    pub fn encode_vars(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Var {
        let h = g.conv2d(x, p.var("enc.conv1.w"), 2, 1);
        let h = g.bias_c(h, p.var("enc.conv1.b"));
        let h = g.tanh(h);
        let z = g.conv2d(h, p.var("enc.conv2.w"), self.second_stride(), 1);
        g.bias_c(z, p.var("enc.conv2.b"))
    }

    /// Tape-level decoder: `[B,c,h,w] -> [B,3,H,W]`, sigmoid output in (0,1).
    pub fn decode_vars(&self, g: &mut Graph, p: &BoundParams, z: Var) -> Var {
        let h = if self.spec.downsample == 4 {
            g.upsample2x(z)
        } else {
            z
        };
        let h = g.conv2d(h, p.var("dec.conv1.w"), 1, 1);
        let h = g.bias_c(h, p.var("dec.conv1.b"));
        let h = g.tanh(h);
        let h = g.upsample2x(h);
        let h = g.conv2d(h, p.var("dec.conv2.w"), 1, 1);
        let h = g.bias_c(h, p.var("dec.conv2.b"));
        g.sigmoid(h)
    }

    /// Encode raw pixel frames `[B,3,H,W]` (no clip-level invariants).
    pub fn encode_pixels(&self, frames: &Array4<f64>) -> Result<Array4<f64>> {
        let (_, _, h, w) = frames.dim();
        if h % self.spec.downsample != 0 || w % self.spec.downsample != 0 {
            return Err(LsaError::invalid(
                "encode",
                format!("{h}x{w} not divisible by downsample {}", self.spec.downsample),
            ));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(frames.clone().into_dyn());
        let z = self.encode_vars(&mut g, &p, x);
        Ok(to4(g.value(z)))
    }

    /// Encode a clip into clean latents (sigma = 0).
    pub fn encode(&self, clip: &VideoClip) -> Result<LatentClip> {
        clip.check_divisibility(self.spec.downsample, "codec downsample")?;
        LatentClip::new(self.encode_pixels(&clip.frames)?, 0.0)
    }

    /// Decode clean latents back to pixel-shaped frames in (0,1).
    pub fn decode(&self, latents: &LatentClip) -> Result<Array4<f64>> {
        if latents.sigma != 0.0 {
            return Err(LsaError::invalid(
                "decode",
                format!("latents carry sigma = {}, expected clean", latents.sigma),
            ));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let z = g.constant(latents.latents.clone().into_dyn());
        let x = self.decode_vars(&mut g, &p, z);
        Ok(to4(g.value(x)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_backbone(path, "codec", &self.spec, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (spec, params) = load_backbone(path, "codec")?;
        let spec: CodecSpec =
            serde_json::from_value(spec).map_err(|e| LsaError::malformed(path.display().to_string(), e.to_string()))?;
        let mut codec = Codec::new(spec)?;
        check_param_names(&codec.params, &params, path)?;
        codec.params = params;
        Ok(codec)
    }
}

// ---------------------------------------------------------------------------
// feature extractor

/// Frozen patch feature extractor: seed-fixed patch embedder plus two
/// per-patch channel-mixing layers. Purely local, so translating content by
/// exactly one patch shifts the grid by one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractorSpec {
    pub patch_size: usize,
    pub feature_dim: usize,
    pub parameter_seed: u64,
}

impl Default for FeatureExtractorSpec {
    fn default() -> Self {
        Self {
            patch_size: 4,
            feature_dim: 32,
            parameter_seed: 2000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub spec: FeatureExtractorSpec,
    pub params: ParamSet,
}

impl FeatureExtractor {
    pub fn new(spec: FeatureExtractorSpec) -> Result<Self> {
        if spec.patch_size == 0 || spec.feature_dim == 0 {
            return Err(LsaError::invalid("FeatureExtractorSpec", "zero dims"));
        }
        let mut init = Initializer::new(spec.parameter_seed);
        let (p, d) = (spec.patch_size, spec.feature_dim);
        let mut params = ParamSet::new();
        params.add("patch.w", init.conv(d, 3, p));
        params.add("patch.b", init.normal(&[d], 0.1));
        params.add("mix1.w", init.conv(d, d, 1));
        params.add("mix1.b", init.normal(&[d], 0.1));
        params.add("mix2.w", init.conv(d, d, 1));
        params.add("mix2.b", init.normal(&[d], 0.1));
        Ok(Self { spec, params })
    }

    /// Tape-level extraction: `[B,3,H,W] -> [B,d,H/p,W/p]` (channel-first;
    /// callers converting to [`FeatureGrid`] permute to channel-last).
    pub fn extract_vars(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Var {
        let h = g.conv2d(x, p.var("patch.w"), self.spec.patch_size, 0);
        let h = g.bias_c(h, p.var("patch.b"));
        let h = g.tanh(h);
        let h = g.conv2d(h, p.var("mix1.w"), 1, 0);
        let h = g.bias_c(h, p.var("mix1.b"));
        let h = g.tanh(h);
        let h = g.conv2d(h, p.var("mix2.w"), 1, 0);
        g.bias_c(h, p.var("mix2.b"))
    }

    /// Extract on raw pixel frames `[B,3,H,W]`.
    pub fn extract_pixels(&self, frames: &Array4<f64>) -> Result<FeatureGrid> {
        let (_, _, h, w) = frames.dim();
        if h % self.spec.patch_size != 0 || w % self.spec.patch_size != 0 {
            return Err(LsaError::invalid(
                "extract_features",
                format!("{h}x{w} not divisible by patch size {}", self.spec.patch_size),
            ));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(frames.clone().into_dyn());
        let f = self.extract_vars(&mut g, &p, x);
        FeatureGrid::new(channel_last(&to4(g.value(f))), self.spec.patch_size)
    }

    pub fn extract_features(&self, clip: &VideoClip) -> Result<FeatureGrid> {
        clip.check_divisibility(self.spec.patch_size, "feature patch size")?;
        self.extract_pixels(&clip.frames)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_backbone(path, "extractor", &self.spec, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (spec, params) = load_backbone(path, "extractor")?;
        let spec: FeatureExtractorSpec =
            serde_json::from_value(spec).map_err(|e| LsaError::malformed(path.display().to_string(), e.to_string()))?;
        let mut net = FeatureExtractor::new(spec)?;
        check_param_names(&net.params, &params, path)?;
        net.params = params;
        Ok(net)
    }
}

/// `[B,d,gh,gw] -> [B,gh,gw,d]`
pub fn channel_last(x: &Array4<f64>) -> Array4<f64> {
    x.clone()
        .permuted_axes([0, 2, 3, 1])
        .as_standard_layout()
        .into_owned()
}

/// `[B,gh,gw,d] -> [B,d,gh,gw]`
pub fn channel_first(x: &Array4<f64>) -> Array4<f64> {
    x.clone()
        .permuted_axes([0, 3, 1, 2])
        .as_standard_layout()
        .into_owned()
}

// ---------------------------------------------------------------------------
// denoiser

/// Velocity denoiser shape parameters. Input channels are `2c`: noisy
/// latents concatenated with the replicated first-frame latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserSpec {
    pub latent_channels: usize,
    pub hidden_channels: usize,
    pub cond_dim: usize,
    pub parameter_seed: u64,
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            hidden_channels: 16,
            cond_dim: 32,
            parameter_seed: 3000,
        }
    }
}

/// Small spatio-temporal network: per-frame conv blocks, one depthwise
/// temporal mixing block across N, FiLM conditioning on sigma and on the
/// first-frame embedding.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub spec: DenoiserSpec,
    pub params: ParamSet,
}

impl Denoiser {
    pub fn new(spec: DenoiserSpec) -> Result<Self> {
        let mut init = Initializer::new(spec.parameter_seed);
        let (c, f, dc) = (spec.latent_channels, spec.hidden_channels, spec.cond_dim);
        let mut params = ParamSet::new();
        params.add("in.w", init.conv(f, 2 * c, 3));
        params.add("in.b", init.zeros(&[f]));
        params.add("sig_scale.w", init.linear(f, 2));
        params.add("sig_scale.b", init.zeros(&[f]));
        params.add("sig_shift.w", init.linear(f, 2));
        params.add("sig_shift.b", init.zeros(&[f]));
        params.add("cond_scale.w", init.linear(f, dc));
        params.add("cond_scale.b", init.zeros(&[f]));
        params.add("cond_shift.w", init.linear(f, dc));
        params.add("cond_shift.b", init.zeros(&[f]));
        params.add("temporal.w", init.normal(&[f, 3], 0.4));
        params.add("temporal.b", init.zeros(&[f]));
        params.add("mid.w", init.conv(f, f, 3));
        params.add("mid.b", init.zeros(&[f]));
        params.add("out.w", init.conv(c, f, 3));
        params.add("out.b", init.zeros(&[c]));
        Ok(Self { spec, params })
    }

    fn sigma_features(sigma: f64) -> ArrayD<f64> {
        ArrayD::from_shape_vec(
            IxDyn(&[2]),
            vec![(1.0 + sigma).ln(), sigma / (1.0 + sigma)],
        )
        .unwrap()
    }

    /// Tape-level forward. `zt`: `[N,c,h,w]`, concatenated internally with
    /// the replicated first-frame latent from `cond`.
    pub fn forward_vars(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        zt: Var,
        sigma: f64,
        cond: &ConditionBundle,
    ) -> Var {
        let repl = g.constant(cond.first_frame_latent_replicated.clone().into_dyn());
        let sig = g.constant(Self::sigma_features(sigma));
        let emb = g.constant(cond.first_frame_embedding.clone().into_dyn());

        // normalize the noisy input so activations stay well-scaled at
        // every noise level
        let zin = g.scale(zt, 1.0 / (1.0 + sigma * sigma).sqrt());
        let x = g.concat_c(zin, repl);
        let h = g.conv2d(x, p.var("in.w"), 1, 1);
        let h = g.bias_c(h, p.var("in.b"));

        // FiLM: per-channel scale (1 + s_sigma + s_cond) and shift
        let s_sig = g.linear(sig, p.var("sig_scale.w"), p.var("sig_scale.b"));
        let s_cond = g.linear(emb, p.var("cond_scale.w"), p.var("cond_scale.b"));
        let s = g.add(s_sig, s_cond);
        let s = g.add_scalar(s, 1.0);
        let t_sig = g.linear(sig, p.var("sig_shift.w"), p.var("sig_shift.b"));
        let t_cond = g.linear(emb, p.var("cond_shift.w"), p.var("cond_shift.b"));
        let t = g.add(t_sig, t_cond);
        let h = g.chan_scale(h, s);
        let h = g.bias_c(h, t);
        let h0 = g.tanh(h);

        let tm = g.temporal_conv(h0, p.var("temporal.w"));
        let tm = g.bias_c(tm, p.var("temporal.b"));
        let tm = g.tanh(tm);
        let h1 = g.add(h0, tm);

        let m = g.conv2d(h1, p.var("mid.w"), 1, 1);
        let m = g.bias_c(m, p.var("mid.b"));
        let m = g.tanh(m);
        let h2 = g.add(h1, m);

        let v = g.conv2d(h2, p.var("out.w"), 1, 1);
        g.bias_c(v, p.var("out.b"))
    }

    /// Inference entry point.
    pub fn denoise(
        &self,
        zt: &LatentClip,
        sigma: f64,
        cond: &ConditionBundle,
    ) -> Result<VelocityPrediction> {
        let (n, c, h, w) = zt.shape();
        if cond.first_frame_latent_replicated.dim() != (n, c, h, w) {
            return Err(LsaError::shape(
                "denoise condition",
                format!("{:?}", zt.shape()),
                format!("{:?}", cond.first_frame_latent_replicated.dim()),
            ));
        }
        if c != self.spec.latent_channels || cond.first_frame_embedding.len() != self.spec.cond_dim
        {
            return Err(LsaError::shape(
                "denoise channels",
                format!("c = {}, cond = {}", self.spec.latent_channels, self.spec.cond_dim),
                format!("c = {c}, cond = {}", cond.first_frame_embedding.len()),
            ));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let z = g.constant(zt.latents.clone().into_dyn());
        let v = self.forward_vars(&mut g, &p, z, sigma, cond);
        VelocityPrediction::new(to4(g.value(v)), sigma)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_backbone(path, "denoiser", &self.spec, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (spec, params) = load_backbone(path, "denoiser")?;
        let spec: DenoiserSpec =
            serde_json::from_value(spec).map_err(|e| LsaError::malformed(path.display().to_string(), e.to_string()))?;
        let mut net = Denoiser::new(spec)?;
        check_param_names(&net.params, &params, path)?;
        net.params = params;
        Ok(net)
    }
}

/// The three backbones used end to end. Only the denoiser is ever trainable
/// during fine-tuning; the codec is frozen after pre-training and the
/// extractor is frozen always.
#[derive(Debug, Clone)]
pub struct Backbones {
    pub codec: Codec,
    pub denoiser: Denoiser,
    pub extractor: FeatureExtractor,
}

impl Backbones {
    pub fn condition_for(&self, frames: &Array4<f64>, n: usize) -> Result<ConditionBundle> {
        ConditionBundle::from_first_frame(frames, n, &self.codec, &self.extractor)
    }
}

// ---------------------------------------------------------------------------
// checkpoint container

#[derive(Serialize, Deserialize)]
struct BackboneFile {
    format_version: u32,
    kind: String,
    spec: serde_json::Value,
    params: Vec<ParamBlob>,
}

fn save_backbone<S: Serialize>(path: &Path, kind: &str, spec: &S, params: &ParamSet) -> Result<()> {
    let file = BackboneFile {
        format_version: CHECKPOINT_VERSION,
        kind: kind.to_string(),
        spec: serde_json::to_value(spec).expect("spec serialization"),
        params: params.to_blobs(),
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| LsaError::io(parent.display().to_string(), e))?;
    }
    let json = serde_json::to_string(&file).expect("checkpoint serialization");
    fs::write(path, json).map_err(|e| LsaError::io(path.display().to_string(), e))
}

fn load_backbone(path: &Path, expected_kind: &str) -> Result<(serde_json::Value, ParamSet)> {
    let text = fs::read_to_string(path).map_err(|e| LsaError::io(path.display().to_string(), e))?;
    let file: BackboneFile = serde_json::from_str(&text)
        .map_err(|e| LsaError::malformed(path.display().to_string(), e.to_string()))?;
    if file.format_version != CHECKPOINT_VERSION {
        return Err(LsaError::FormatVersion {
            found: file.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if file.kind != expected_kind {
        return Err(LsaError::malformed(
            path.display().to_string(),
            format!("kind {} where {expected_kind} expected", file.kind),
        ));
    }
    Ok((file.spec, ParamSet::from_blobs(&file.params)?))
}

fn check_param_names(expected: &ParamSet, got: &ParamSet, path: &Path) -> Result<()> {
    if expected.len() != got.len()
        || expected
            .iter()
            .zip(got.iter())
            .any(|((a, av), (b, bv))| a != b || av.shape() != bv.shape())
    {
        return Err(LsaError::malformed(
            path.display().to_string(),
            "parameter names/shapes do not match the configured architecture",
        ));
    }
    Ok(())
}

fn to4(x: &ArrayD<f64>) -> Array4<f64> {
    x.clone()
        .into_dimensionality::<Ix4>()
        .expect("4-d tensor")
        .as_standard_layout()
        .into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn rand_frames(seed: u64, n: usize, h: usize, w: usize) -> Array4<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Array4::from_shape_fn((n, 3, h, w), |_| {
            let u: f64 = rand::Rng::gen(&mut rng);
            (u * 255.0).round() / 255.0
        })
    }

    fn test_clip(seed: u64) -> VideoClip {
        VideoClip::new(rand_frames(seed, 4, 16, 16), 7, "bb-test").unwrap()
    }

    #[test]
    fn encode_is_deterministic_with_shape_contract() {
        let codec = Codec::new(CodecSpec::default()).unwrap();
        let clip = test_clip(1);
        let z1 = codec.encode(&clip).unwrap();
        let z2 = codec.encode(&clip).unwrap();
        assert_eq!(z1.latents, z2.latents);
        assert_eq!(z1.shape(), (4, 4, 4, 4));
        assert_eq!(z1.sigma, 0.0);
    }

    #[test]
    fn per_frame_codec_localizes_frame_changes() {
        let codec = Codec::new(CodecSpec::default()).unwrap();
        let clip_a = test_clip(2);
        let mut frames_b = clip_a.frames.clone();
        for v in frames_b.index_axis_mut(ndarray::Axis(0), 2).iter_mut() {
            *v = (*v * 0.5 * 255.0).round() / 255.0;
        }
        let clip_b = VideoClip::new(frames_b, 7, "b").unwrap();
        let za = codec.encode(&clip_a).unwrap();
        let zb = codec.encode(&clip_b).unwrap();
        for j in 0..4 {
            let same = za.latents.index_axis(ndarray::Axis(0), j)
                == zb.latents.index_axis(ndarray::Axis(0), j);
            assert_eq!(same, j != 2, "frame {j}");
        }
    }

    #[test]
    fn decode_shape_and_range() {
        let codec = Codec::new(CodecSpec::default()).unwrap();
        let clip = test_clip(3);
        let z = codec.encode(&clip).unwrap();
        let x = codec.decode(&z).unwrap();
        assert_eq!(x.dim(), (4, 3, 16, 16));
        assert!(x.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn decode_gradient_matches_finite_differences() {
        let codec = Codec::new(CodecSpec::default()).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let z = Array4::from_shape_fn((2, 4, 4, 4), |_| StandardNormal.sample(&mut rng));

        let eval = |z: &Array4<f64>| -> f64 {
            let mut g = Graph::new();
            let p = codec.params.bind(&mut g, false);
            let zv = g.constant(z.clone().into_dyn());
            let x = codec.decode_vars(&mut g, &p, zv);
            let m = g.mean_all(x);
            g.scalar(m)
        };

        let mut g = Graph::new();
        let p = codec.params.bind(&mut g, false);
        let zv = g.leaf(z.clone().into_dyn(), true);
        let x = codec.decode_vars(&mut g, &p, zv);
        let m = g.mean_all(x);
        let grads = g.backward(m);
        let analytic = grads.get(zv).unwrap();

        let eps = 1e-3;
        for &flat in &[0usize, 17, 63, 100] {
            let mut plus = z.clone();
            let mut minus = z.clone();
            plus.as_slice_mut().unwrap()[flat] += eps;
            minus.as_slice_mut().unwrap()[flat] -= eps;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let an = analytic.as_slice().unwrap()[flat];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!((fd - an).abs() / denom < 1e-4, "fd {fd} vs {an}");
        }
    }

    #[test]
    fn extractor_deterministic_and_shaped() {
        let net = FeatureExtractor::new(FeatureExtractorSpec::default()).unwrap();
        let clip = test_clip(4);
        let f1 = net.extract_features(&clip).unwrap();
        let f2 = net.extract_features(&clip).unwrap();
        assert_eq!(f1.features, f2.features);
        assert_eq!(f1.features.dim(), (4, 4, 4, 32));
    }

    #[test]
    fn extractor_shifts_with_patch_translation() {
        let net = FeatureExtractor::new(FeatureExtractorSpec::default()).unwrap();
        let p = net.spec.patch_size;
        let frames = rand_frames(5, 2, 16, 16);
        let mut shifted = frames.clone();
        // translate content right by exactly p pixels
        let (n, c, h, w) = frames.dim();
        for j in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        shifted[[j, ch, y, x]] = if x >= p { frames[[j, ch, y, x - p]] } else { 0.0 };
                    }
                }
            }
        }
        let fa = net.extract_pixels(&frames).unwrap();
        let fb = net.extract_pixels(&shifted).unwrap();
        let (gw, d) = (fa.features.dim().2, fa.features.dim().3);
        for u in 0..fa.features.dim().1 {
            for v in 1..gw {
                for k in 0..d {
                    let a = fa.features[[0, u, v - 1, k]];
                    let b = fb.features[[0, u, v, k]];
                    assert!((a - b).abs() < 1e-12, "cell ({u},{v},{k})");
                }
            }
        }
    }

    #[test]
    fn extractor_gradient_matches_finite_differences() {
        let net = FeatureExtractor::new(FeatureExtractorSpec::default()).unwrap();
        let frames = rand_frames(6, 2, 8, 8);

        let eval = |x: &Array4<f64>| -> f64 {
            let mut g = Graph::new();
            let p = net.params.bind(&mut g, false);
            let xv = g.constant(x.clone().into_dyn());
            let f = net.extract_vars(&mut g, &p, xv);
            let sq = g.square(f);
            let m = g.mean_all(sq);
            g.scalar(m)
        };

        let mut g = Graph::new();
        let p = net.params.bind(&mut g, false);
        let xv = g.leaf(frames.clone().into_dyn(), true);
        let f = net.extract_vars(&mut g, &p, xv);
        let sq = g.square(f);
        let m = g.mean_all(sq);
        let grads = g.backward(m);
        let analytic = grads.get(xv).unwrap();

        let eps = 1e-3;
        for &flat in &[0usize, 31, 97, 200] {
            let mut plus = frames.clone();
            let mut minus = frames.clone();
            plus.as_slice_mut().unwrap()[flat] += eps;
            minus.as_slice_mut().unwrap()[flat] -= eps;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let an = analytic.as_slice().unwrap()[flat];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!((fd - an).abs() / denom < 1e-4, "fd {fd} vs {an}");
        }
    }

    fn nets() -> Backbones {
        Backbones {
            codec: Codec::new(CodecSpec::default()).unwrap(),
            denoiser: Denoiser::new(DenoiserSpec::default()).unwrap(),
            extractor: FeatureExtractor::new(FeatureExtractorSpec::default()).unwrap(),
        }
    }

    #[test]
    fn denoiser_shape_contract_and_live_conditioning() {
        let nets = nets();
        let clip = test_clip(7);
        let z0 = nets.codec.encode(&clip).unwrap();
        let cond = nets.condition_for(&clip.frames, 4).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let noise = Array4::from_shape_fn(z0.shape(), |_| StandardNormal.sample(&mut rng));
        let zt = crate::diffusion::add_noise(&z0, 1.3, &noise).unwrap();

        let v = nets.denoiser.denoise(&zt, 1.3, &cond).unwrap();
        assert_eq!(v.v.dim(), z0.shape());

        // perturbing the first-frame embedding changes the output
        let mut cond2 = cond.clone();
        cond2.first_frame_embedding[0] += 0.5;
        let v2 = nets.denoiser.denoise(&zt, 1.3, &cond2).unwrap();
        let diff: f64 = (&v.v - &v2.v).iter().map(|d| d * d).sum();
        assert!(diff > 0.0);
    }

    #[test]
    fn gradient_reaches_every_denoiser_parameter() {
        let nets = nets();
        let clip = test_clip(8);
        let z0 = nets.codec.encode(&clip).unwrap();
        let cond = nets.condition_for(&clip.frames, 4).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let noise = Array4::from_shape_fn(z0.shape(), |_| StandardNormal.sample(&mut rng));
        let zt = crate::diffusion::add_noise(&z0, 0.8, &noise).unwrap();

        let mut g = Graph::new();
        let p = nets.denoiser.params.bind(&mut g, true);
        let z = g.constant(zt.latents.clone().into_dyn());
        let v = nets.denoiser.forward_vars(&mut g, &p, z, 0.8, &cond);
        let sq = g.square(v);
        let loss = g.mean_all(sq);
        let grads = g.backward(loss);
        for (i, var) in p.vars().iter().enumerate() {
            let grad = grads.get(*var).unwrap_or_else(|| {
                panic!("no gradient for {}", nets.denoiser.params.name_at(i))
            });
            assert!(
                grad.iter().any(|&v| v != 0.0),
                "all-zero gradient for {}",
                nets.denoiser.params.name_at(i)
            );
        }
    }

    #[test]
    fn condition_bundle_rejects_unequal_slices() {
        let mut repl = Array4::zeros((3, 2, 2, 2));
        repl[[1, 0, 0, 0]] = 1.0;
        assert!(ConditionBundle::new(repl, Array1::zeros(4)).is_err());
    }

    #[test]
    fn backbone_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let nets = nets();
        let path = dir.path().join("denoiser.json");
        nets.denoiser.save(&path).unwrap();
        let loaded = Denoiser::load(&path).unwrap();
        assert_eq!(loaded.params.content_hash(), nets.denoiser.params.content_hash());
        assert_eq!(loaded.spec, nets.denoiser.spec);
        // kind mismatch rejected
        assert!(Codec::load(&path).is_err());
    }

    #[test]
    fn frozen_extractor_hash_stable_across_forwards() {
        let net = FeatureExtractor::new(FeatureExtractorSpec::default()).unwrap();
        let h0 = net.params.content_hash();
        let _ = net.extract_features(&test_clip(12)).unwrap();
        assert_eq!(net.params.content_hash(), h0);
    }
}
