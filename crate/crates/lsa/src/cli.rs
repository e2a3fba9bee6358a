//! Command implementations behind the `lsa` binary: dataset generation,
//! codec pre-training, fine-tuning, generation, evaluation, and the
//! ablation grid.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbones::{Backbones, Codec, Denoiser, FeatureExtractor};
use crate::clip::{load_clip, save_clip, BoxTrack, VideoClip};
use crate::config::RunConfig;
use crate::error::{LsaError, Result};
use crate::eval::{evaluate, generate_for_clip, EvalReport};
use crate::loss::MaskVariant;
use crate::scenes::{generate_dataset, load_split, Manifest};
use crate::trainer::{pretrain_codec, ScheduleMode, Trainer};

fn write_resolved_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    cfg.save(&dir.join("config.json"))
}

/// Generate the train/test dataset. Refuses a non-empty `out_dir` unless
/// `force` is set.
pub fn cmd_make_data(cfg: &RunConfig, out_dir: &Path, force: bool) -> Result<Manifest> {
    if out_dir.exists() {
        let non_empty = std::fs::read_dir(out_dir)
            .map_err(|e| LsaError::io(out_dir.display().to_string(), e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(LsaError::invalid(
                "make-data",
                format!(
                    "{} exists and is not empty; pass --force to overwrite",
                    out_dir.display()
                ),
            ));
        }
    }
    let manifest = generate_dataset(
        &cfg.data.distribution,
        cfg.data.train_count,
        cfg.data.test_count,
        cfg.data.num_frames,
        cfg.data.height,
        cfg.data.width,
        cfg.seed,
        out_dir,
    )?;
    write_resolved_config(cfg, out_dir)?;
    Ok(manifest)
}

/// Pre-train the codec on the train split and write `codec.json`.
pub fn cmd_pretrain_codec(cfg: &RunConfig, data_dir: &Path, out_dir: &Path) -> Result<f64> {
    let manifest = Manifest::load(&data_dir.join("manifest.json"))?;
    let train = load_split(&manifest, data_dir, "train")?;
    let mut codec = Codec::new(cfg.backbones.codec.clone())?;
    let loss = pretrain_codec(
        &mut codec,
        &train,
        cfg.pretrain.steps,
        cfg.pretrain.learning_rate,
        cfg.pretrain.batch_size,
        cfg.seed,
    )?;
    std::fs::create_dir_all(out_dir).map_err(|e| LsaError::io(out_dir.display().to_string(), e))?;
    codec.save(&out_dir.join("codec.json"))?;
    write_resolved_config(cfg, out_dir)?;
    Ok(loss)
}

fn initial_backbones(cfg: &RunConfig, codec_path: Option<&Path>) -> Result<Backbones> {
    let codec = match codec_path {
        Some(p) => Codec::load(p)?,
        None => Codec::new(cfg.backbones.codec.clone())?,
    };
    Ok(Backbones {
        codec,
        denoiser: Denoiser::new(cfg.backbones.denoiser.clone())?,
        extractor: FeatureExtractor::new(cfg.backbones.extractor.clone())?,
    })
}

/// Fine-tune the denoiser per the configured schedule; writes checkpoints,
/// the NDJSON metrics log, and the resolved config under `out_dir`.
pub fn cmd_train(
    cfg: &RunConfig,
    data_dir: &Path,
    codec_path: Option<&Path>,
    out_dir: &Path,
) -> Result<Trainer> {
    let manifest = Manifest::load(&data_dir.join("manifest.json"))?;
    let train = load_split(&manifest, data_dir, "train")?;
    let nets = initial_backbones(cfg, codec_path)?;
    let schedule = cfg.train.schedule(cfg.seed)?;
    let mut trainer = Trainer::new(nets, schedule)?;
    std::fs::create_dir_all(out_dir).map_err(|e| LsaError::io(out_dir.display().to_string(), e))?;
    write_resolved_config(cfg, out_dir)?;
    trainer.run(&train, Some(out_dir))?;
    Ok(trainer)
}

/// Generate one clip per test clip, conditioned on its first frame, and
/// write them in the standard clip-directory format (with empty box lists —
/// generated clips carry no ground truth).
pub fn cmd_generate(
    cfg: &RunConfig,
    checkpoint_dir: &Path,
    data_dir: &Path,
    out_dir: &Path,
) -> Result<usize> {
    let manifest = Manifest::load(&data_dir.join("manifest.json"))?;
    let test = load_split(&manifest, data_dir, "test")?;
    if test.is_empty() {
        return Err(LsaError::invalid("generate", "manifest has no test clips"));
    }
    let nets = Backbones {
        codec: Codec::load(&checkpoint_dir.join("codec.json"))?,
        denoiser: Denoiser::load(&checkpoint_dir.join("denoiser.json"))?,
        extractor: FeatureExtractor::load(&checkpoint_dir.join("extractor.json"))?,
    };
    let schedule = cfg.sampler.schedule()?;
    std::fs::create_dir_all(out_dir).map_err(|e| LsaError::io(out_dir.display().to_string(), e))?;
    write_resolved_config(cfg, out_dir)?;

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.eval.seed);
    let seeds: Vec<u64> = (0..test.len()).map(|_| rng.gen()).collect();
    test.par_iter()
        .zip(seeds.par_iter())
        .map(|((clip, _), &seed)| -> Result<()> {
            let frames = generate_for_clip(&nets, &schedule, clip, seed)
                .map_err(|e| LsaError::Msg(format!("clip {}: {e}", clip.clip_id)))?;
            let quantized = frames.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
            let gen_clip = VideoClip::new(quantized, clip.fps, clip.clip_id.clone())?;
            let empty = BoxTrack {
                frames: vec![Vec::new(); gen_clip.num_frames()],
            };
            save_clip(&gen_clip, &empty, &out_dir.join(&clip.clip_id))
                .map_err(|e| LsaError::Msg(format!("clip {}: {e}", clip.clip_id)))
        })
        .collect::<Result<Vec<()>>>()?;
    Ok(test.len())
}

/// Score a directory of generated clips against the ground-truth test split.
pub fn cmd_eval(
    cfg: &RunConfig,
    generated_dir: &Path,
    data_dir: &Path,
    out_dir: &Path,
) -> Result<EvalReport> {
    let manifest = Manifest::load(&data_dir.join("manifest.json"))?;
    let test = load_split(&manifest, data_dir, "test")?;

    // alignment check: every test clip must exist in the generated set
    let missing: Vec<String> = test
        .iter()
        .filter(|(c, _)| !generated_dir.join(&c.clip_id).join("annotations.json").exists())
        .map(|(c, _)| c.clip_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(LsaError::invalid(
            "eval",
            format!("generated clips missing for ids: {}", missing.join(", ")),
        ));
    }
    let generated: Vec<_> = test
        .par_iter()
        .map(|(c, _)| load_clip(&generated_dir.join(&c.clip_id)).map(|(clip, _)| clip.frames))
        .collect::<Result<Vec<_>>>()?;

    let extractor = FeatureExtractor::new(cfg.backbones.extractor.clone())?;
    let report = crate::eval::report_for(&test, &generated, &extractor, &cfg.eval)?;
    std::fs::create_dir_all(out_dir).map_err(|e| LsaError::io(out_dir.display().to_string(), e))?;
    report.save_json(&out_dir.join("report.json"))?;
    report.save_csv(&out_dir.join("report.csv"))?;
    write_resolved_config(cfg, out_dir)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// ablation grid

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub config_name: String,
    pub seed: u64,
    pub map: f64,
    pub miou: f64,
    pub frechet_frame: f64,
    pub frechet_clip: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianRow {
    pub map: f64,
    pub miou: f64,
    pub frechet_frame: f64,
    pub frechet_clip: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub runs: Vec<AblationRun>,
    pub medians: BTreeMap<String, MedianRow>,
}

pub fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// The five grid entries: the three mask variants under the staged
/// schedule, the joint-schedule hybrid, and the diffusion-only baseline.
pub fn ablation_grid() -> Vec<(&'static str, ScheduleMode, Option<MaskVariant>)> {
    vec![
        ("staged-hybrid", ScheduleMode::Staged, Some(MaskVariant::Hybrid)),
        ("staged-box-only", ScheduleMode::Staged, Some(MaskVariant::BoxOnly)),
        ("staged-global-only", ScheduleMode::Staged, Some(MaskVariant::GlobalOnly)),
        ("joint-hybrid", ScheduleMode::Joint, Some(MaskVariant::Hybrid)),
        ("diffusion-only", ScheduleMode::Joint, None),
    ]
}

/// Train and evaluate one grid entry on pre-loaded data.
pub fn run_ablation_entry(
    cfg: &RunConfig,
    train: &[(VideoClip, BoxTrack)],
    test: &[(VideoClip, BoxTrack)],
    codec: &Codec,
    name: &str,
    mode: ScheduleMode,
    variant: Option<MaskVariant>,
    seed: u64,
) -> Result<AblationRun> {
    let mut train_cfg = cfg.train.clone();
    train_cfg.mode = mode;
    match variant {
        Some(v) => train_cfg.variant = v,
        None => train_cfg.diffusion_only = true,
    }
    // identical init and eval noise across runs: the seed varies only the
    // training stochasticity, so config differences are not drowned out
    let nets = Backbones {
        codec: codec.clone(),
        denoiser: Denoiser::new(cfg.backbones.denoiser.clone())?,
        extractor: FeatureExtractor::new(cfg.backbones.extractor.clone())?,
    };
    let schedule = train_cfg.schedule(seed)?;
    let mut trainer = Trainer::new(nets, schedule)?;
    trainer.run(train, None)?;

    let sampler = cfg.sampler.schedule()?;
    let eval_cfg = cfg.eval.clone();
    let report = evaluate(&trainer.nets, &sampler, test, &eval_cfg)?;
    Ok(AblationRun {
        config_name: name.to_string(),
        seed,
        map: report.map,
        miou: report.miou,
        frechet_frame: report.frechet_frame,
        frechet_clip: report.frechet_clip,
    })
}

/// Execute the full grid over `seeds`, write `ablation.json` and a text
/// table, and return the summary.
pub fn cmd_run_ablation(
    cfg: &RunConfig,
    data_dir: &Path,
    out_dir: &Path,
    seeds: &[u64],
) -> Result<AblationSummary> {
    let manifest = Manifest::load(&data_dir.join("manifest.json"))?;
    let train = load_split(&manifest, data_dir, "train")?;
    let test = load_split(&manifest, data_dir, "test")?;

    // one shared pre-trained codec: all compared models decode identically
    let mut codec = Codec::new(cfg.backbones.codec.clone())?;
    pretrain_codec(
        &mut codec,
        &train,
        cfg.pretrain.steps,
        cfg.pretrain.learning_rate,
        cfg.pretrain.batch_size,
        cfg.seed,
    )?;

    let mut runs = Vec::new();
    for &seed in seeds {
        for (name, mode, variant) in ablation_grid() {
            let run =
                run_ablation_entry(cfg, &train, &test, &codec, name, mode, variant, seed)?;
            eprintln!(
                "[ablation] {name} seed {seed}: mAP {:.4} mIoU {:.4} frechet_frame {:.4}",
                run.map, run.miou, run.frechet_frame
            );
            runs.push(run);
        }
    }

    let mut medians = BTreeMap::new();
    for (name, _, _) in ablation_grid() {
        let of = |f: fn(&AblationRun) -> f64| {
            let mut v: Vec<f64> = runs
                .iter()
                .filter(|r| r.config_name == name)
                .map(f)
                .collect();
            median(&mut v)
        };
        medians.insert(
            name.to_string(),
            MedianRow {
                map: of(|r| r.map),
                miou: of(|r| r.miou),
                frechet_frame: of(|r| r.frechet_frame),
                frechet_clip: of(|r| r.frechet_clip),
            },
        );
    }
    let summary = AblationSummary { runs, medians };

    std::fs::create_dir_all(out_dir).map_err(|e| LsaError::io(out_dir.display().to_string(), e))?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serialization");
    let path = out_dir.join("ablation.json");
    std::fs::write(&path, json).map_err(|e| LsaError::io(path.display().to_string(), e))?;
    std::fs::write(out_dir.join("ablation.txt"), format_ablation_table(&summary))
        .map_err(|e| LsaError::io(out_dir.display().to_string(), e))?;
    write_resolved_config(cfg, out_dir)?;
    Ok(summary)
}

pub fn format_ablation_table(summary: &AblationSummary) -> String {
    let mut s = String::from(
        "config               median_mAP  median_mIoU  median_frechet_frame  median_frechet_clip\n",
    );
    for (name, _, _) in ablation_grid() {
        if let Some(m) = summary.medians.get(name) {
            s.push_str(&format!(
                "{name:<20} {:>10.4}  {:>11.4}  {:>20.4}  {:>19.4}\n",
                m.map, m.miou, m.frechet_frame, m.frechet_clip
            ));
        }
    }
    s
}

// ---------------------------------------------------------------------------
// clap surface

pub mod args {
    use super::*;
    use clap::{Parser, Subcommand};

    #[derive(Parser)]
    #[command(name = "lsa", about = "Desk-scale video diffusion fine-tuning with localized semantic alignment")]
    pub struct Cli {
        /// JSON run config; defaults apply when omitted
        #[arg(long, global = true)]
        pub config: Option<PathBuf>,
        /// Override the config seed
        #[arg(long, global = true)]
        pub seed: Option<u64>,
        #[command(subcommand)]
        pub command: Command,
    }

    #[derive(Subcommand)]
    pub enum Command {
        /// Generate the synthetic train/test dataset
        MakeData {
            #[arg(long)]
            out: PathBuf,
            #[arg(long)]
            force: bool,
            #[arg(long)]
            train_count: Option<usize>,
            #[arg(long)]
            test_count: Option<usize>,
        },
        /// Pre-train the latent codec on the train split
        PretrainCodec {
            #[arg(long)]
            data: PathBuf,
            #[arg(long)]
            out: PathBuf,
        },
        /// Fine-tune the denoiser
        Train {
            #[arg(long)]
            data: PathBuf,
            /// pre-trained codec checkpoint (codec.json); fresh init if omitted
            #[arg(long)]
            codec: Option<PathBuf>,
            #[arg(long)]
            out: PathBuf,
            /// staged | joint | diffusion-only
            #[arg(long)]
            schedule: Option<String>,
            /// hybrid | box-only | global-only
            #[arg(long)]
            variant: Option<String>,
            #[arg(long)]
            epochs: Option<usize>,
            #[arg(long)]
            lambda_feat: Option<f64>,
            #[arg(long)]
            learning_rate: Option<f64>,
            #[arg(long)]
            batch_size: Option<usize>,
        },
        /// Sample clips from a checkpoint, conditioned on test first frames
        Generate {
            #[arg(long)]
            checkpoint: PathBuf,
            #[arg(long)]
            data: PathBuf,
            #[arg(long)]
            out: PathBuf,
        },
        /// Score generated clips against the ground-truth test split
        Eval {
            #[arg(long)]
            generated: PathBuf,
            #[arg(long)]
            data: PathBuf,
            #[arg(long)]
            out: PathBuf,
        },
        /// Run the full variant/schedule grid and emit a comparison table
        RunAblation {
            #[arg(long)]
            data: PathBuf,
            #[arg(long)]
            out: PathBuf,
            /// comma-separated training seeds
            #[arg(long, default_value = "0,1,2")]
            seeds: String,
        },
    }

    pub fn parse_schedule(s: &str, cfg: &mut crate::config::TrainConfig) -> Result<()> {
        match s {
            "staged" => cfg.mode = ScheduleMode::Staged,
            "joint" => cfg.mode = ScheduleMode::Joint,
            "diffusion-only" => cfg.diffusion_only = true,
            other => {
                return Err(LsaError::invalid(
                    "--schedule",
                    format!("{other} (expected staged | joint | diffusion-only)"),
                ))
            }
        }
        Ok(())
    }

    pub fn parse_variant(s: &str) -> Result<MaskVariant> {
        match s {
            "hybrid" => Ok(MaskVariant::Hybrid),
            "box-only" => Ok(MaskVariant::BoxOnly),
            "global-only" => Ok(MaskVariant::GlobalOnly),
            other => Err(LsaError::invalid(
                "--variant",
                format!("{other} (expected hybrid | box-only | global-only)"),
            )),
        }
    }

    pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
        s.split(',')
            .map(|p| {
                p.trim()
                    .parse::<u64>()
                    .map_err(|e| LsaError::invalid("--seeds", format!("{p}: {e}")))
            })
            .collect()
    }
}
