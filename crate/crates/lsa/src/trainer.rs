//! Training loop: staged/joint schedules, deterministic batching, frozen
//! codec/extractor enforcement, per-epoch checkpoints, and bit-reproducible
//! resume.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array4, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbones::{Backbones, Codec, Denoiser, FeatureExtractor, CHECKPOINT_VERSION};
use crate::clip::{BoxTrack, LossBreakdown, VideoClip};
use crate::error::{LsaError, Result};
use crate::graph::Graph;
use crate::loss::{lsa_training_loss, LossConfig, MaskVariant};
use crate::nn::{clip_global_norm, AdamW, AdamWState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleMode {
    Staged,
    Joint,
}

/// Log-normal sigma sampling parameters for training draws.
pub const SIGMA_LOCATION: f64 = -1.2;
pub const SIGMA_SCALE: f64 = 1.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub mode: ScheduleMode,
    pub epochs: usize,
    pub epoch_configs: Vec<LossConfig>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub grad_clip: f64,
    pub weight_decay: f64,
}

impl TrainSchedule {
    /// Epoch 1 diffusion-only, later epochs combined.
    pub fn staged(
        epochs: usize,
        lambda_feat: f64,
        variant: MaskVariant,
        alpha: f64,
        learning_rate: f64,
        batch_size: usize,
        seed: u64,
    ) -> Self {
        let mut epoch_configs = vec![LossConfig::diffusion_only()];
        for _ in 1..epochs {
            epoch_configs.push(LossConfig::combined(lambda_feat, variant, alpha));
        }
        Self {
            mode: ScheduleMode::Staged,
            epochs,
            epoch_configs,
            learning_rate,
            batch_size,
            seed,
            grad_clip: 1.0,
            weight_decay: 0.0,
        }
    }

    /// Combined objective from the first step.
    pub fn joint(
        epochs: usize,
        lambda_feat: f64,
        variant: MaskVariant,
        alpha: f64,
        learning_rate: f64,
        batch_size: usize,
        seed: u64,
    ) -> Self {
        Self {
            mode: ScheduleMode::Joint,
            epochs,
            epoch_configs: vec![LossConfig::combined(lambda_feat, variant, alpha); epochs],
            learning_rate,
            batch_size,
            seed,
            grad_clip: 1.0,
            weight_decay: 0.0,
        }
    }

    /// Diffusion loss only in every epoch (the untreated baseline).
    pub fn diffusion_only(epochs: usize, learning_rate: f64, batch_size: usize, seed: u64) -> Self {
        Self {
            mode: ScheduleMode::Joint,
            epochs,
            epoch_configs: vec![LossConfig::diffusion_only(); epochs],
            learning_rate,
            batch_size,
            seed,
            grad_clip: 1.0,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.epoch_configs.len() != self.epochs {
            return Err(LsaError::invalid(
                "TrainSchedule",
                format!(
                    "{} epoch configs for {} epochs",
                    self.epoch_configs.len(),
                    self.epochs
                ),
            ));
        }
        if self.batch_size == 0 || self.learning_rate <= 0.0 {
            return Err(LsaError::invalid(
                "TrainSchedule",
                "batch_size and learning_rate must be positive",
            ));
        }
        for cfg in &self.epoch_configs {
            cfg.validate()?;
        }
        match self.mode {
            ScheduleMode::Staged => {
                let first = &self.epoch_configs[0];
                if first.lambda_feat != 0.0 || first.diffusion_weight != 1.0 {
                    return Err(LsaError::invalid(
                        "TrainSchedule",
                        "staged epoch 1 must be diffusion-only (lambda 0, weight 1.0)",
                    ));
                }
                for (i, cfg) in self.epoch_configs.iter().enumerate().skip(1) {
                    if cfg.lambda_feat <= 0.0 || cfg.diffusion_weight != 0.9 {
                        return Err(LsaError::invalid(
                            "TrainSchedule",
                            format!("staged epoch {} must use the combined config", i + 1),
                        ));
                    }
                }
            }
            ScheduleMode::Joint => {
                if self.epoch_configs.iter().any(|c| c != &self.epoch_configs[0]) {
                    return Err(LsaError::invalid(
                        "TrainSchedule",
                        "joint mode must use one config for every epoch",
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: usize,
    pub diffusion_loss: f64,
    pub feature_loss: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    /// base64 of the 32-byte ChaCha seed
    pub seed_b64: String,
    pub word_pos_lo: u64,
    pub word_pos_hi: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha12Rng) -> Self {
        use base64::Engine;
        let pos = rng.get_word_pos();
        Self {
            seed_b64: base64::engine::general_purpose::STANDARD.encode(rng.get_seed()),
            word_pos_lo: pos as u64,
            word_pos_hi: (pos >> 64) as u64,
        }
    }

    pub fn restore(&self) -> Result<ChaCha12Rng> {
        use base64::Engine;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&self.seed_b64)
            .map_err(|e| LsaError::invalid("RngState", e.to_string()))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| LsaError::invalid("RngState", "seed must be 32 bytes"))?;
        let mut rng = ChaCha12Rng::from_seed(seed);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub global_step: u64,
    /// epochs fully completed so far
    pub epoch: usize,
    pub rng_state: RngState,
    pub metric_history: Vec<MetricRecord>,
}

#[derive(Serialize, Deserialize)]
struct TrainerFile {
    format_version: u32,
    schedule: TrainSchedule,
    state: RunState,
    optimizer: AdamWState,
    /// spec echo used to detect mixed checkpoints on resume
    denoiser_spec: crate::backbones::DenoiserSpec,
}

pub struct Trainer {
    pub nets: Backbones,
    pub schedule: TrainSchedule,
    pub opt: AdamW,
    pub state: RunState,
    rng: ChaCha12Rng,
}

impl Trainer {
    pub fn new(nets: Backbones, schedule: TrainSchedule) -> Result<Self> {
        schedule.validate()?;
        let opt = AdamW::new(schedule.learning_rate, schedule.weight_decay, &nets.denoiser.params);
        let rng = ChaCha12Rng::seed_from_u64(schedule.seed);
        let state = RunState {
            global_step: 0,
            epoch: 0,
            rng_state: RngState::capture(&rng),
            metric_history: Vec::new(),
        };
        Ok(Self { nets, schedule, opt, state, rng })
    }

    /// Run all remaining epochs. Checkpoints and an NDJSON metrics log are
    /// written under `out_dir` when given.
    pub fn run(
        &mut self,
        dataset: &[(VideoClip, BoxTrack)],
        out_dir: Option<&Path>,
    ) -> Result<()> {
        if dataset.is_empty() {
            return Err(LsaError::invalid("train", "empty dataset"));
        }
        let codec_hash = self.nets.codec.params.content_hash();
        let extractor_hash = self.nets.extractor.params.content_hash();

        let mut log = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| LsaError::io(dir.display().to_string(), e))?;
                let path = dir.join("metrics.ndjson");
                Some(
                    fs::OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(&path)
                        .map_err(|e| LsaError::io(path.display().to_string(), e))?,
                )
            }
            None => None,
        };

        for epoch in self.state.epoch..self.schedule.epochs {
            self.run_epoch(dataset, epoch, log.as_mut())?;
            self.state.epoch = epoch + 1;
            self.state.rng_state = RngState::capture(&self.rng);
            if let Some(dir) = out_dir {
                self.save(dir)?;
            }
        }

        // freezing contract: only the denoiser may change
        debug_assert_eq!(self.nets.codec.params.content_hash(), codec_hash);
        debug_assert_eq!(self.nets.extractor.params.content_hash(), extractor_hash);
        if self.nets.codec.params.content_hash() != codec_hash
            || self.nets.extractor.params.content_hash() != extractor_hash
        {
            return Err(LsaError::invalid("train", "frozen module changed during training"));
        }
        Ok(())
    }

    fn run_epoch(
        &mut self,
        dataset: &[(VideoClip, BoxTrack)],
        epoch: usize,
        mut log: Option<&mut fs::File>,
    ) -> Result<()> {
        let cfg = self.schedule.epoch_configs[epoch];

        // deterministic shuffle: derived from (seed, epoch), independent of
        // the main draw stream so resume cannot shift it
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut shuffle_rng =
            ChaCha12Rng::seed_from_u64(self.schedule.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut shuffle_rng);

        for batch in order.chunks(self.schedule.batch_size) {
            // one sigma and one noise tensor per clip, drawn sequentially
            // from the main stream (kept out of the parallel section)
            let draws: Vec<(usize, f64, Array4<f64>)> = batch
                .iter()
                .map(|&i| {
                    let sigma =
                        crate::diffusion::sample_sigma(&mut self.rng, SIGMA_LOCATION, SIGMA_SCALE);
                    let z0_shape = latent_shape(&self.nets.codec, &dataset[i].0);
                    let noise =
                        Array4::from_shape_fn(z0_shape, |_| StandardNormal.sample(&mut self.rng));
                    (i, sigma, noise)
                })
                .collect();

            let outputs: Vec<_> = draws
                .par_iter()
                .map(|(i, sigma, noise)| {
                    let (clip, boxes) = &dataset[*i];
                    lsa_training_loss(clip, boxes, *sigma, noise, &self.nets, &cfg)
                        .map(|out| (*i, out))
                })
                .collect::<Result<Vec<_>>>()?;

            // batch-mean gradients accumulated in index order
            let mut grads: Vec<ArrayD<f64>> = self
                .nets
                .denoiser
                .params
                .iter()
                .map(|(_, v)| ArrayD::zeros(IxDyn(v.shape())))
                .collect();
            let mut mean = LossBreakdown {
                diffusion_loss: 0.0,
                feature_loss: 0.0,
                total: 0.0,
                diffusion_weight: cfg.diffusion_weight,
                lambda_feat: cfg.lambda_feat,
            };
            let scale = 1.0 / outputs.len() as f64;
            for (i, out) in &outputs {
                if !out.breakdown.total.is_finite() {
                    return Err(LsaError::NonFinite(format!(
                        "training step {} (epoch {}, clip {})",
                        self.state.global_step + 1,
                        epoch + 1,
                        dataset[*i].0.clip_id
                    )));
                }
                for (acc, g) in grads.iter_mut().zip(&out.denoiser_grads) {
                    acc.scaled_add(scale, g);
                }
                mean.diffusion_loss += scale * out.breakdown.diffusion_loss;
                mean.feature_loss += scale * out.breakdown.feature_loss;
                mean.total += scale * out.breakdown.total;
            }

            clip_global_norm(&mut grads, self.schedule.grad_clip);
            self.opt.step(&mut self.nets.denoiser.params, &grads);
            self.state.global_step += 1;

            let record = MetricRecord {
                step: self.state.global_step,
                epoch: epoch + 1,
                diffusion_loss: mean.diffusion_loss,
                feature_loss: mean.feature_loss,
                total: mean.total,
            };
            if let Some(f) = log.as_deref_mut() {
                let line = serde_json::to_string(&record).expect("metric serialization");
                writeln!(f, "{line}").map_err(|e| LsaError::io("metrics.ndjson", e))?;
            }
            self.state.metric_history.push(record);
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| LsaError::io(dir.display().to_string(), e))?;
        self.nets.codec.save(&dir.join("codec.json"))?;
        self.nets.denoiser.save(&dir.join("denoiser.json"))?;
        self.nets.extractor.save(&dir.join("extractor.json"))?;
        let file = TrainerFile {
            format_version: CHECKPOINT_VERSION,
            schedule: self.schedule.clone(),
            state: self.state.clone(),
            optimizer: self.opt.to_state(),
            denoiser_spec: self.nets.denoiser.spec.clone(),
        };
        let path = dir.join("trainer.json");
        let json = serde_json::to_string(&file).expect("trainer serialization");
        fs::write(&path, json).map_err(|e| LsaError::io(path.display().to_string(), e))
    }

    /// Restore a trainer from a checkpoint directory; continuing with `run`
    /// reproduces the uninterrupted run bit for bit.
    pub fn resume(dir: &Path) -> Result<Self> {
        let path = dir.join("trainer.json");
        let text =
            fs::read_to_string(&path).map_err(|e| LsaError::io(path.display().to_string(), e))?;
        let file: TrainerFile = serde_json::from_str(&text)
            .map_err(|e| LsaError::malformed(path.display().to_string(), e.to_string()))?;
        if file.format_version != CHECKPOINT_VERSION {
            return Err(LsaError::FormatVersion {
                found: file.format_version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let nets = Backbones {
            codec: Codec::load(&dir.join("codec.json"))?,
            denoiser: Denoiser::load(&dir.join("denoiser.json"))?,
            extractor: FeatureExtractor::load(&dir.join("extractor.json"))?,
        };
        if nets.denoiser.spec != file.denoiser_spec {
            return Err(LsaError::invalid(
                "resume",
                format!(
                    "denoiser spec mismatch: checkpoint trained {:?}, found {:?}",
                    file.denoiser_spec, nets.denoiser.spec
                ),
            ));
        }
        file.schedule.validate()?;
        let rng = file.state.rng_state.restore()?;
        Ok(Self {
            nets,
            schedule: file.schedule,
            opt: AdamW::from_state(&file.optimizer)?,
            state: file.state,
            rng,
        })
    }
}

fn latent_shape(codec: &Codec, clip: &VideoClip) -> (usize, usize, usize, usize) {
    let (n, _, h, w) = clip.frames.dim();
    (
        n,
        codec.spec.latent_channels,
        h / codec.spec.downsample,
        w / codec.spec.downsample,
    )
}

/// Pre-train the codec on frame reconstruction (plain MSE) before the
/// denoiser fine-tuning freezes it. Returns the final batch loss.
pub fn pretrain_codec(
    codec: &mut Codec,
    dataset: &[(VideoClip, BoxTrack)],
    steps: usize,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(LsaError::invalid("pretrain_codec", "empty dataset"));
    }
    let mut opt = AdamW::new(learning_rate, 0.0, &codec.params);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut last = f64::NAN;
    for step in 0..steps {
        // sample a batch of frames across random clips
        let mut frames = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let (clip, _) = &dataset[rng.gen_range(0..dataset.len())];
            let j = rng.gen_range(0..clip.num_frames());
            frames.push(clip.frames.index_axis(ndarray::Axis(0), j).to_owned());
        }
        let (c, h, w) = frames[0].dim();
        let mut batch = Array4::zeros((frames.len(), c, h, w));
        for (j, f) in frames.iter().enumerate() {
            batch.index_axis_mut(ndarray::Axis(0), j).assign(f);
        }

        let mut g = Graph::new();
        let p = codec.params.bind(&mut g, true);
        let x = g.constant(batch.clone().into_dyn());
        let z = codec.encode_vars(&mut g, &p, x);
        let xr = codec.decode_vars(&mut g, &p, z);
        let neg = batch.mapv(|v| -v).into_dyn();
        let diff = g.affine_const(xr, 1.0, neg);
        let sq = g.square(diff);
        let loss = g.mean_all(sq);
        last = g.scalar(loss);
        if !last.is_finite() {
            return Err(LsaError::NonFinite(format!("pretrain_codec step {step}")));
        }
        let grads = g.backward(loss);
        let grad_vec: Vec<ArrayD<f64>> = p
            .vars()
            .iter()
            .enumerate()
            .map(|(i, var)| {
                grads
                    .get(*var)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(IxDyn(codec.params.value_at(i).shape())))
            })
            .collect();
        let mut grad_vec = grad_vec;
        clip_global_norm(&mut grad_vec, 1.0);
        opt.step(&mut codec.params, &grad_vec);
    }
    Ok(last)
}
